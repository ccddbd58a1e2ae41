"""
The captioned shapes corpus
===========================

Every image holds one shape on a flat background. Four attributes are drawn
independently (shape, colour, size, background), position and rotation are
jittered, and the caption is built from the attributes by a fixed template.
"""

import sys
from pathlib import Path

import numpy as np

from semguide.corpus import CorpusSpec, foreground_centroid, generate_corpus, holdout_split, parse_caption
from semguide.io import write_ppm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# A small corpus is enough to look at. Item i depends only on (seed, i).
corpus = generate_corpus(CorpusSpec(count=64, seed=0))
for caption in corpus.captions[:6]:
    print(caption)

# Captions parse back into attributes.
print(parse_caption(corpus.captions[0]))

# Where is the shape? The centroid is what the structure/content comparison
# measures later on.
for img in corpus.images[:4]:
    print("centroid (x, y) = (%.1f, %.1f)" % foreground_centroid(img))

# A contact sheet of the first 16 images, 4 by 4.
sheet = corpus.images[:16].reshape(4, 4, 3, 32, 32).transpose(2, 0, 3, 1, 4).reshape(3, 128, 128)
write_ppm(out / "corpus_sheet.ppm", sheet)

# Held-out split used for retrieval evaluation.
train, test = holdout_split(corpus, 0.25, seed=0)
print(len(train), "train /", len(test), "test")
