"""Joint blur-operator and dictionary learning for image deblurring.

Learns a block-Toeplitz blur matrix and a high-resolution patch dictionary
from paired, unpaired, or non-corresponding image data, then deblurs by
sparse coding over the derived coupled dictionaries.
"""

from .blur import (AdamState, BasisMatrixSet, BlurMatrix, adam_step, bme_gr,
                   bme_sr, build_basis_matrices, build_blur_matrix,
                   project_to_toeplitz, realize_theta, structure_residual)
from .dictionary import (Dictionary, cdl_train, init_dictionary,
                         joint_ksvd_update, ksvd_update_paired, rank_one_update)
from .imaging import (GaussianKernelSpec, Image, PatchSet, extract_patch_pairs,
                      extract_patches_grid, gaussian_kernel,
                      generate_blurred_dataset, load_image, narrow_convolve,
                      random_patches, save_image)
from .inference import (AggregationBuffer, DeblurRequest, deblur,
                        derive_lr_dictionary, naive_baseline,
                        reconstruct_patches)
from .metrics import (MetricReport, blur_error_db, laplace_variance, psnr,
                      sobel_variance, ssim)
from .sparse import LassoProblem, SparseCodes, fista_solve, lipschitz_step
from .training import (LossTrace, ModelCheckpoint, TrainConfig,
                       load_checkpoint, save_checkpoint,
                       train_no_correspondence, train_paired)

__version__ = "0.1.0"
