"""Virtual contrast enhancement laboratory.

Synthetic paired pre/post-contrast brain phantoms, a from-scratch autodiff
engine, conditional diffusion and flow-matching models over difference
images, posterior ensembles, and the evaluation stack.
"""

from .dataset import SlicePair, Split, augment, extract_pairs, make_split, normalize
from .diffusion import NoiseSchedule, dm_sample, dsm_loss, forward_noise, reverse_sample
from .flowmatch import OdeProblem, cfm_loss, dopri5, fm_sample, integrate_fixed
from .metrics import (dice_jaccard, mae, pearson, relative_error, ssim, sweep,
                      threshold_segment)
from .nets import UNetLite
from .phantom import PhantomRecipe, PhantomVolume, generate, paired_modalities
from .posterior import PosteriorEnsemble, aggregate, reconstruct
from .tensor import Adam, Tensor, load_vct, no_grad, save_vct
from .training import predict_e2e, train_model

__version__ = "0.1.0"
