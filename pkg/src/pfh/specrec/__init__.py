from pfh.specrec import (
    cli,
    evaluation,
    extras,
    hypergraph,
    linalg,
    model,
    spectral,
    training,
    util,
)
from pfh.specrec._version import version as __version__
