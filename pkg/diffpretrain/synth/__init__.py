from diffpretrain.synth.corpus import (
    generate_corpus, iter_phantoms, load_corpus, load_corpus_volumes, write_corpus,
)
from diffpretrain.synth.phantom import Phantom, body_axis, ellipsoid_mask, generate_phantom
