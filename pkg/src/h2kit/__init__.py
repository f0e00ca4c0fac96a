"""H2 hierarchical matrices with nested bases."""
from .geometry import (BlockStructure, BoundingBox, ClusterTree, PointCloud, StructureError, admissible,
                       build_cluster_tree, dual_tree_traversal, grid_points, load_points)
from .h2core import (BasisTree, BatchPlan, ConstructionError, CouplingLevel, H2Matrix, VectorTree,
                     marshal_tree_multiply_level, marshal_upsweep_level, memory_report, to_dense)
from .construct import (ExponentialKernel, FractionalKernel, FunctionKernel, cheb_nodes, construct_h2,
                        coupling_matrix, leaf_basis, transfer_matrix)
from .matvec import dense_multiply, downsweep, h2_matvec, matvec_flops, tree_multiply, upsweep
from .kernels import available_backends, use_backend
from .basisops import compress, orthogonalize
from .h2io import load_h2, save_h2

__version__ = "0.1.0"
