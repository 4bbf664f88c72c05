"""Force-field graph representation learning.

Vertices interact through a gated force kernel: attribute similarity times a
structural social tie, thresholded so negligible interactions drop out. The
encoder aggregates neighbor signals under this kernel, a discriminator reads
per-class force signatures, and the combined silhouette + discriminator
objective pulls same-class vertices into shared attractors. The tie model
makes the whole pipeline inductive: ties on unseen graphs are predicted, not
recomputed.
"""

from .autodiff import NonFiniteError, ParamStore, Tensor, adam_step, grad_check
from .forces import (
    ForceKernel,
    GroupForce,
    force_kernel,
    group_force,
    membership_matrix,
    receptive_field,
    similarity,
    similarity_matrix,
)
from .graphs import (
    Graph,
    GraphFormatError,
    PathTable,
    all_pairs_paths,
    build_graph,
    generate_sbm,
    load_graph,
    save_graph,
    weighted_degree,
)
from .nets import (
    DiscriminatorConfig,
    EncoderConfig,
    discriminator_forward,
    discriminator_loss,
    encoder_forward,
    init_params,
    silhouette_loss,
    total_loss,
)
from .ties import (
    TieMetrics,
    TieModel,
    structural_embedding,
    tie_exact,
    tie_matrix_exact,
    tie_metrics,
    tie_model_matrix,
    tie_model_predict,
    tie_model_train,
)
from .training import (
    DivergenceError,
    TrainConfig,
    TrainedModel,
    classify,
    embed_graph,
    evaluate_inductive,
    train,
)

__version__ = "0.1.0"
