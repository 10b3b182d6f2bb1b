"""Implicit surfaces as a smooth base SDF plus a bounded normal displacement."""

from .config import RunConfig, parse_config_text
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    DispfieldError,
    InapplicableBoundError,
    ParseError,
    PipelineOrderError,
    ShapeError,
    TrainingDivergence,
    UnsupportedFormatError,
    ValidationError,
)
from .fields import (
    BumpySphereField,
    NetworkField,
    PlaneField,
    ScalarField,
    SphereField,
    builtin_field,
)
from .geometry import (
    OrientedPointCloud,
    TriangleMesh,
    load_cloud,
    load_mesh,
    normalize_mesh,
    sample_surface,
    save_cloud,
    save_mesh,
)
from .meshing import ScalarGrid, marching_cubes, sample_grid, weld_vertices
from .metrics import MetricsReport, chamfer_metrics, nearest_neighbors
from .model import AblationSwitches, DisplacementModel, attenuation, build_model
from .precision import get_dtype, set_deterministic, set_precision
from .sirens import Siren
from .theory import BoundReport, FieldConstants, estimate_constants, verify_bounds
from .training import (
    TrainConfig,
    TrainingHistory,
    annealed_lr,
    fit,
    fit_base,
    progressive_blend,
    siren_loss,
    sphere_pretrain,
)
from .transfer import (
    FeatureGrid,
    FilmSiren,
    GridSettings,
    PointEncoder,
    TransferConfig,
    TransferModel,
    TransferPipeline,
    build_transfer_model,
    transfer_pipeline,
)

__version__ = "0.1.0"
