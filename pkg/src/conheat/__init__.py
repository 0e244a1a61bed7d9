"""Connection-Laplacian heat kernels on sampled manifolds, and the embeddings
and local diagnostics built from them."""

from .errors import ConheatError, GeometryError, InputError, SpectrumError
from .manifold import (FrameField, SampledManifold, estimate_frames, generate_manifold,
                       geodesic_distance, load_manifold)
from .laplacian import (Laplacian, Spectrum, build_connection_laplacian, build_laplacians,
                        build_scalar_laplacian, eigendecompose, read_spectrum, write_spectrum)
from .stencil import TangentStencil
from .heat import (gaussian_bound_check, hs_norm_field, hs_norm_sq, tail_energy,
                   trace_domination_check, truncated_kernel, truncation_bound, truncation_error)
from .net import (DeltaNet, Partition, farthest_point_net, replicate_centers, replication_counts,
                  voronoi_partition)
from .embedding import (EmbeddingConfig, compute_Ve, embed_uniform, embed_weighted,
                        estimate_dilatation, scan_parameters, verify_almost_isometry,
                        verify_injectivity)
from .chart import Chart, build_chart, compare_kernels, distortion_sweep

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
