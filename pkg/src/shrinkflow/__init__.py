"""Mean curvature flow of convex surfaces and Brownian motion on the moving slices."""
from .errors import *  # noqa: F401,F403
__version__ = "0.1.0"

from .mesh import TriangulatedHypersurface, builtin_mesh, ellipsoid, icosphere, read_mesh, validate_convex_mesh, write_off
from .geodesic import GeodesicPath, SurfacePoint, TangentVector, minimal_geodesic, parallel_transport, walk_exponential
from .flow import FlowTrajectory, SphereOracle, mcf_step, normalize_and_time_maps, run_flow, sphere_oracle, sphere_trajectory
from .brownian import GeneratorConvention, gtbm_step, martingale_qv_test, simulate_ensemble, simulate_path
from .coupling import CouplingConfig, comparison_G, comparison_gap, injectivity_proxy, mirror_map, run_coupling_schedule
from .density import DensityField, solve_density, step_density, uniqueness_experiment


