"""Non co-adapted couplings of subRiemannian Brownian motions on step 2 Carnot groups."""

__title__ = "carnot_coupling"
__description__ = (
    "Non co-adapted couplings of subRiemannian Brownian motions on step 2 Carnot groups."
)
__version__ = "0.1.0.dev0"
__url__ = "https://github.com/pawelad/carnot_coupling"
__author__ = "Paweł Adamczak"
__email__ = "pawel.ad@gmail.com"
__license__ = "MPL-2.0"
