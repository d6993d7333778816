from ._core import *  # noqa: F401,F403
from ._core import Error, Mlp, LaplaceSystem, FullPosterior, IpvInstance, Likelihood  # noqa: F401
