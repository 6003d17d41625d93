"""
Catalog Service - celestial catalogs, coordinate conversion and synthetic data
Handles catalog validation, CSV persistence and hierarchical synthetic catalogs
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd

from geowalk.core.errors import CatalogValidationError, ConfigurationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TOP_LEVEL_SPREAD = 0.3  # radians
LEVEL_SHRINK = 0.35


@dataclass
class Catalog:
    """Object ids, celestial coordinates (degrees) and the n x d feature matrix"""

    ids: List[str]
    ra: np.ndarray
    dec: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.ra = np.asarray(self.ra, dtype=np.float64)
        self.dec = np.asarray(self.dec, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.validate()

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def validate(self):
        n = len(self.ids)
        if n < 1:
            raise CatalogValidationError("catalog must contain at least one object")
        if self.ra.shape != (n,) or self.dec.shape != (n,):
            raise CatalogValidationError(
                f"ra/dec must have length {n}, got {self.ra.shape} and {self.dec.shape}"
            )
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise CatalogValidationError(f"features must be an {n} x d matrix, got {self.features.shape}")
        if len(set(self.ids)) != n:
            raise CatalogValidationError("catalog contains duplicate ids")
        validate_coordinates(self.ra, self.dec)
        if not np.isfinite(self.features).all():
            raise CatalogValidationError("features contain non-finite values")

    def unit_vectors(self) -> np.ndarray:
        return celestial_to_vector(self.ra, self.dec)


@dataclass
class CatalogTargets:
    """Per-object supervision: regression target, class target, hierarchy depth"""

    ids: List[str]
    regression: np.ndarray
    classes: np.ndarray
    leaf_depth: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.regression = np.asarray(self.regression, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.leaf_depth = np.asarray(self.leaf_depth, dtype=np.int64)
        n = len(self.ids)
        if not (len(self.regression) == len(self.classes) == len(self.leaf_depth) == n):
            raise CatalogValidationError("target columns must all have one entry per id")

    @property
    def n(self) -> int:
        return len(self.ids)

    def aligned_to(self, catalog: Catalog) -> "CatalogTargets":
        """Reorder to the catalog's id order"""
        if self.ids == catalog.ids:
            return self
        position = {obj_id: i for i, obj_id in enumerate(self.ids)}
        missing = [obj_id for obj_id in catalog.ids if obj_id not in position]
        if missing:
            raise CatalogValidationError(f"targets missing for {len(missing)} ids, e.g. {missing[0]}")
        order = np.array([position[obj_id] for obj_id in catalog.ids])
        return CatalogTargets(
            catalog.ids, self.regression[order], self.classes[order], self.leaf_depth[order]
        )


def validate_coordinates(ra, dec):
    ra = np.asarray(ra, dtype=np.float64)
    dec = np.asarray(dec, dtype=np.float64)
    if not (np.isfinite(ra).all() and np.isfinite(dec).all()):
        raise CatalogValidationError("coordinates must be finite")
    if ((ra < 0) | (ra >= 360)).any():
        raise CatalogValidationError("right ascension must lie in [0, 360) degrees")
    if ((dec < -90) | (dec > 90)).any():
        raise CatalogValidationError("declination must lie in [-90, 90] degrees")


def celestial_to_vector(ra, dec) -> np.ndarray:
    """
    Convert equatorial ra, dec in degrees to x, y, z on the unit sphere
    Scalars give a 3-vector, arrays an n x 3 matrix
    """
    validate_coordinates(ra, dec)
    ra_rad = np.deg2rad(np.asarray(ra, dtype=np.float64))
    dec_rad = np.deg2rad(np.asarray(dec, dtype=np.float64))
    cos_dec = np.cos(dec_rad)
    return np.stack([cos_dec * np.cos(ra_rad), cos_dec * np.sin(ra_rad), np.sin(dec_rad)], axis=-1)


def vector_to_celestial(xyz: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    xyz = np.asarray(xyz, dtype=np.float64)
    xyz = xyz / np.linalg.norm(xyz, axis=-1, keepdims=True)
    ra = np.mod(np.degrees(np.arctan2(xyz[..., 1], xyz[..., 0])), 360.0)
    ra = np.where(ra >= 360.0, 0.0, ra)
    dec = np.degrees(np.arcsin(np.clip(xyz[..., 2], -1.0, 1.0)))
    return ra, dec


def angular_separation(ra1, dec1, ra2, dec2) -> np.ndarray:
    """
    Angular separation in radians (Vincenty formula)
    Stable at all distances, including the poles and antipodes
    """
    lon1, lat1 = np.radians(ra1), np.radians(dec1)
    lon2, lat2 = np.radians(ra2), np.radians(dec2)

    sdlon = np.sin(lon2 - lon1)
    cdlon = np.cos(lon2 - lon1)
    slat1 = np.sin(lat1)
    slat2 = np.sin(lat2)
    clat1 = np.cos(lat1)
    clat2 = np.cos(lat2)

    num1 = clat2 * sdlon
    num2 = clat1 * slat2 - slat1 * clat2 * cdlon
    denominator = slat1 * slat2 + clat1 * clat2 * cdlon

    return np.arctan2(np.hypot(num1, num2), denominator)


# SYNTHETIC CATALOGS ###########################################################


def _fibonacci_directions(count: int, rng: np.random.Generator) -> np.ndarray:
    """Well-spread unit vectors under a random rotation"""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    points = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    q, upper = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(upper))
    return points @ q.T


def _offset(center: np.ndarray, angle, rng: np.random.Generator) -> np.ndarray:
    """Move unit vectors by `angle` radians in a random tangent direction"""
    center = np.atleast_2d(center)
    t = rng.normal(size=center.shape)
    t -= (t * center).sum(axis=-1, keepdims=True) * center
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    angle = np.reshape(angle, (-1, 1))
    moved = np.cos(angle) * center + np.sin(angle) * t
    return moved / np.linalg.norm(moved, axis=-1, keepdims=True)


def synth_catalog(
    seed: int,
    n: int,
    n_clusters: int,
    depth: int,
    feature_dim: int = 1024,
    branching: int = 3,
    noise: float = 0.3,
) -> Tuple[Catalog, CatalogTargets]:
    """
    Hierarchical cluster tree on the celestial sphere

    Even-numbered top-level clusters nest `depth` levels deep (clusters of
    clusters of objects), odd-numbered ones stay flat, so both hierarchy-dominant
    and flat populations exist whenever n_clusters > 1. Features are the leaf's
    cluster signature plus noise; the regression target depends on the cluster
    path, the hierarchy depth and the declination; the class is the top-level
    cluster id.
    """
    if n_clusters < 1 or n < n_clusters:
        raise ConfigurationError(f"need n >= n_clusters >= 1, got n={n}, n_clusters={n_clusters}")
    if depth < 1 or branching < 1 or feature_dim < 1 or noise < 0:
        raise ConfigurationError("depth, branching and feature_dim must be >= 1 and noise >= 0")

    rng = np.random.default_rng(seed)
    centers = _fibonacci_directions(n_clusters, rng)

    trees = []
    for j in range(n_clusters):
        leaf_depth = depth if (j % 2 == 0 or n_clusters == 1) else 1
        level_centers = [centers[j : j + 1]]
        level_signatures = [rng.normal(size=(1, feature_dim))]
        level_values = [rng.normal(size=1)]
        for level in range(1, leaf_depth):
            parents = np.repeat(level_centers[-1], branching, axis=0)
            spread = TOP_LEVEL_SPREAD * LEVEL_SHRINK ** (level - 1)
            level_centers.append(_offset(parents, np.full(len(parents), spread), rng))
            level_signatures.append(
                np.repeat(level_signatures[-1], branching, axis=0)
                + rng.normal(scale=0.5**level, size=(len(parents), feature_dim))
            )
            level_values.append(
                np.repeat(level_values[-1], branching) + rng.normal(scale=0.5**level, size=len(parents))
            )
        trees.append((leaf_depth, level_centers[-1], level_signatures[-1], level_values[-1]))

    assignment = rng.permutation(np.arange(n) % n_clusters)
    xyz = np.empty((n, 3))
    features = np.empty((n, feature_dim))
    regression = np.empty(n)
    leaf_depths = np.empty(n, dtype=np.int64)

    for j, (leaf_depth, leaf_centers, leaf_signatures, leaf_values) in enumerate(trees):
        members = np.flatnonzero(assignment == j)
        leaves = rng.integers(len(leaf_centers), size=len(members))
        scatter = 0.5 * TOP_LEVEL_SPREAD * LEVEL_SHRINK ** (leaf_depth - 1)
        angles = np.abs(rng.normal(scale=scatter, size=len(members)))
        xyz[members] = _offset(leaf_centers[leaves], angles, rng)
        features[members] = leaf_signatures[leaves] + rng.normal(scale=noise, size=(len(members), feature_dim))
        regression[members] = leaf_values[leaves] + 0.5 * leaf_depth / depth
        leaf_depths[members] = leaf_depth

    ra, dec = vector_to_celestial(xyz)
    regression = regression + 0.3 * np.sin(np.deg2rad(dec)) + 0.05 * rng.normal(size=n)

    ids = [f"OBJ{i:06d}" for i in range(n)]
    catalog = Catalog(ids, ra, dec, features)
    targets = CatalogTargets(ids, regression, assignment, leaf_depths)
    logger.info(
        f"synthesized catalog: n={n}, clusters={n_clusters}, depth={depth}, feature_dim={feature_dim}"
    )
    return catalog, targets


# CSV PERSISTENCE ##############################################################


def save_catalog(catalog: Catalog, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(catalog.features, columns=[f"f{i}" for i in range(catalog.feature_dim)])
    frame.insert(0, "dec", catalog.dec)
    frame.insert(0, "ra", catalog.ra)
    frame.insert(0, "id", catalog.ids)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def load_catalog(path: PathLike) -> Catalog:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise CatalogValidationError(f"cannot parse catalog {path}: {e}")

    feature_columns = [col for col in frame.columns if col not in ("id", "ra", "dec")]
    expected = [f"f{i}" for i in range(len(feature_columns))]
    if list(frame.columns[:3]) != ["id", "ra", "dec"] or feature_columns != expected or not expected:
        raise CatalogValidationError(f"catalog header must be id,ra,dec,f0..f{{d-1}} in {path}")
    try:
        features = frame[feature_columns].to_numpy(dtype=np.float64)
    except ValueError as e:
        raise CatalogValidationError(f"non-numeric feature values in {path}: {e}")
    return Catalog(frame["id"].tolist(), frame["ra"].to_numpy(), frame["dec"].to_numpy(), features)


def save_targets(targets: CatalogTargets, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "id": targets.ids,
            "regression_target": targets.regression,
            "class_target": targets.classes,
            "leaf_depth": targets.leaf_depth,
        }
    )
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def load_targets(path: PathLike) -> CatalogTargets:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise CatalogValidationError(f"cannot parse targets {path}: {e}")
    required = ["id", "regression_target", "class_target"]
    if list(frame.columns[:3]) != required:
        raise CatalogValidationError(f"targets header must start with id,regression_target,class_target in {path}")
    leaf_depth = frame["leaf_depth"] if "leaf_depth" in frame.columns else np.ones(len(frame), dtype=np.int64)
    return CatalogTargets(
        frame["id"].tolist(), frame["regression_target"], frame["class_target"], leaf_depth
    )
