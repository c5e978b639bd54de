"""Augmentation policies, parameter drawing and the five volume operators.

A policy (``AugmentSpec``) is declarative. :func:`draw` realises it into
concrete parameters from an :class:`~augment3d.rng.RngStream`, and
:func:`apply_params` applies those parameters. :func:`apply_pipeline`
does both, giving each member of a composition its own substream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from .rng import RngStream
from .sampling import Affine4, ControlGrid, bspline_upsample, warp_affine, warp_displacement
from .volume import Volume3


class SpecError(ValueError):
    """Invalid augmentation policy."""


# -- policies -----------------------------------------------------------------


@dataclass(frozen=True)
class FlipX:
    probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise SpecError(f"flip probability must be in [0, 1], got {self.probability}")


@dataclass(frozen=True)
class Rotate:
    max_deg: float = 15.0

    def __post_init__(self):
        if not self.max_deg > 0:
            raise SpecError(f"max_deg must be positive, got {self.max_deg}")


@dataclass(frozen=True)
class Scale:
    max_frac: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.max_frac < 1.0:
            raise SpecError(f"max_frac must be in (0, 1), got {self.max_frac}")


@dataclass(frozen=True)
class Brightness:
    lo: float = 0.8
    hi: float = 1.2

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise SpecError(f"brightness range [{self.lo}, {self.hi}] is empty")


@dataclass(frozen=True)
class Elastic:
    sigma_vox: float = 2.0
    grid: Tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        if not self.sigma_vox >= 0:
            raise SpecError(f"sigma_vox must be non-negative, got {self.sigma_vox}")
        grid = tuple(int(g) for g in self.grid)
        if len(grid) != 3 or min(grid) < 2:
            raise SpecError(f"elastic grid needs 3 axes of at least 2 points, got {self.grid}")
        object.__setattr__(self, "grid", grid)


@dataclass(frozen=True)
class NoAugment:
    pass


@dataclass(frozen=True)
class Compose:
    specs: Tuple[Any, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        if not specs:
            raise SpecError("compose needs at least one member")
        for s in specs:
            if isinstance(s, Compose):
                raise SpecError("compose members cannot be compose")
            if not isinstance(s, _LEAVES):
                raise SpecError(f"not an augmentation spec: {s!r}")
        object.__setattr__(self, "specs", specs)


_LEAVES = (FlipX, Rotate, Scale, Brightness, Elastic, NoAugment)
AugmentSpec = Union[FlipX, Rotate, Scale, Brightness, Elastic, NoAugment, Compose]

KINDS = {
    "flip": FlipX,
    "rotate": Rotate,
    "scale": Scale,
    "brightness": Brightness,
    "elastic": Elastic,
    "none": NoAugment,
    "compose": Compose,
}
_KIND_OF = {cls: kind for kind, cls in KINDS.items()}


def spec_from_dict(d: Dict[str, Any]) -> AugmentSpec:
    """Build a policy from a config mapping such as ``{"kind": "rotate", "max_deg": 15}``.

    Unknown kinds or keys raise :class:`SpecError`.
    """
    if not isinstance(d, dict):
        raise SpecError(f"augmentation spec must be a table, got {type(d).__name__}")
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in KINDS:
        raise SpecError(f"unknown augmentation kind {kind!r}; expected one of {sorted(KINDS)}")
    cls = KINDS[kind]
    if cls is Compose:
        extra = set(d) - {"specs"}
        if extra:
            raise SpecError(f"unknown keys for compose: {sorted(extra)}")
        members = d.get("specs")
        if not isinstance(members, list):
            raise SpecError("compose needs a 'specs' list")
        return Compose(tuple(spec_from_dict(m) for m in members))
    allowed = set(cls.__dataclass_fields__)
    extra = set(d) - allowed
    if extra:
        raise SpecError(f"unknown keys for {kind}: {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise SpecError(str(exc)) from exc


def spec_to_dict(spec: AugmentSpec) -> Dict[str, Any]:
    kind = _KIND_OF[type(spec)]
    if isinstance(spec, Compose):
        return {"kind": kind, "specs": [spec_to_dict(s) for s in spec.specs]}
    out = {"kind": kind}
    for name in spec.__dataclass_fields__:
        value = getattr(spec, name)
        out[name] = list(value) if isinstance(value, tuple) else value
    return out


def spec_label(spec: AugmentSpec) -> str:
    """Short human-readable arm label, e.g. ``rotate15`` or ``scale0.1+elastic2``."""
    if isinstance(spec, Compose):
        return "+".join(spec_label(s) for s in spec.specs)
    if isinstance(spec, FlipX):
        return "flip" if spec.probability == 0.5 else f"flip{spec.probability:g}"
    if isinstance(spec, Rotate):
        return f"rotate{spec.max_deg:g}"
    if isinstance(spec, Scale):
        return f"scale{spec.max_frac:g}"
    if isinstance(spec, Brightness):
        return "brightness" if (spec.lo, spec.hi) == (0.8, 1.2) else f"brightness{spec.lo:g}-{spec.hi:g}"
    if isinstance(spec, Elastic):
        return f"elastic{spec.sigma_vox:g}"
    return "none"


# -- drawn parameters ---------------------------------------------------------


@dataclass(frozen=True)
class FlipParams:
    flip: bool


@dataclass(frozen=True)
class RotateParams:
    angles_deg: Tuple[float, float, float]


@dataclass(frozen=True)
class ScaleParams:
    factors: Tuple[float, float, float]


@dataclass(frozen=True)
class BrightnessParams:
    gain: float
    gamma: float


@dataclass(frozen=True)
class ElasticParams:
    grid: ControlGrid
    sigma_vox: float = 0.0


@dataclass(frozen=True)
class NoParams:
    pass


@dataclass(frozen=True)
class ComposeParams:
    members: Tuple[Any, ...] = field(default_factory=tuple)


DrawnParams = Union[FlipParams, RotateParams, ScaleParams, BrightnessParams, ElasticParams, NoParams, ComposeParams]


def draw(spec: AugmentSpec, rng: RngStream) -> DrawnParams:
    """Realise random parameters for ``spec``.

    Compositions draw member ``i`` from ``rng.child(i)``.
    """
    if isinstance(spec, FlipX):
        return FlipParams(rng.bernoulli(spec.probability))
    if isinstance(spec, Rotate):
        a = rng.uniform(-spec.max_deg, spec.max_deg, 3)
        return RotateParams(tuple(float(x) for x in a))
    if isinstance(spec, Scale):
        s = rng.uniform(1.0 - spec.max_frac, 1.0 + spec.max_frac, 3)
        return ScaleParams(tuple(float(x) for x in s))
    if isinstance(spec, Brightness):
        g, gamma = rng.uniform(spec.lo, spec.hi, 2)
        return BrightnessParams(float(g), float(gamma))
    if isinstance(spec, Elastic):
        gx, gy, gz = spec.grid
        values = rng.normal(spec.sigma_vox, gx * gy * gz * 3).reshape(gx, gy, gz, 3)
        return ElasticParams(ControlGrid(values), spec.sigma_vox)
    if isinstance(spec, NoAugment):
        return NoParams()
    if isinstance(spec, Compose):
        return ComposeParams(tuple(draw(s, rng.child(i)) for i, s in enumerate(spec.specs)))
    raise SpecError(f"not an augmentation spec: {spec!r}")


def params_record(params: DrawnParams) -> Dict[str, Any]:
    """JSON-serialisable record of drawn parameters (one per operator)."""
    if isinstance(params, FlipParams):
        return {"op": "flip", "flip": params.flip}
    if isinstance(params, RotateParams):
        ax, ay, az = params.angles_deg
        return {"op": "rotate", "ax": ax, "ay": ay, "az": az}
    if isinstance(params, ScaleParams):
        sx, sy, sz = params.factors
        return {"op": "scale", "sx": sx, "sy": sy, "sz": sz}
    if isinstance(params, BrightnessParams):
        return {"op": "brightness", "g": params.gain, "gamma": params.gamma}
    if isinstance(params, ElasticParams):
        v = params.grid.values
        return {
            "op": "elastic",
            "sigma_vox": params.sigma_vox,
            "grid": list(params.grid.grid_shape),
            "max_abs_disp": float(np.abs(v).max()) if v.size else 0.0,
            "control": v.round(6).tolist(),
        }
    if isinstance(params, NoParams):
        return {"op": "none"}
    if isinstance(params, ComposeParams):
        return {"op": "compose", "ops": [params_record(p) for p in params.members]}
    raise TypeError(f"unknown parameter type {type(params).__name__}")


# -- operators ----------------------------------------------------------------


def apply_flip(vol: Volume3, flip: bool) -> Volume3:
    if not flip:
        return vol
    return Volume3(vol.data[::-1, :, :])


def rotation_matrix(angles_deg) -> np.ndarray:
    """``Rz(az) @ Ry(ay) @ Rx(ax)`` for angles in degrees."""
    ax, ay, az = (math.radians(a) for a in angles_deg)
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rz @ ry @ rx


def apply_rotation(vol: Volume3, angles_deg) -> Volume3:
    """Rotate about the volume centre; output pulls through ``R^-1 = R^T``."""
    r = rotation_matrix(angles_deg)
    return warp_affine(vol, Affine4.from_linear(r.T))


def apply_scale(vol: Volume3, factors) -> Volume3:
    sx, sy, sz = (float(f) for f in factors)
    if min(sx, sy, sz) <= 0:
        raise ValueError(f"scale factors must be positive, got {factors}")
    return warp_affine(vol, Affine4.from_linear(np.diag([1.0 / sx, 1.0 / sy, 1.0 / sz])))


def apply_brightness(vol: Volume3, g: float, gamma: float) -> Volume3:
    """Power-law intensity map ``g * sign(I) * |I|**gamma``.

    For non-negative intensities this is ``g * I**gamma``; the sign
    extension keeps negative voxels (common in derivative maps) finite.
    """
    if g == 1.0 and gamma == 1.0:
        return vol
    x = vol.data.astype(np.float64)
    out = g * np.copysign(np.abs(x) ** gamma, x)
    return Volume3(out.astype(np.float32))


def apply_elastic(vol: Volume3, grid: ControlGrid) -> Volume3:
    if not isinstance(grid, ControlGrid):
        grid = ControlGrid(grid)
    if not grid.values.any():
        return vol
    return warp_displacement(vol, bspline_upsample(grid, vol.shape))


def apply_params(vol: Volume3, params: DrawnParams) -> Volume3:
    if isinstance(params, FlipParams):
        return apply_flip(vol, params.flip)
    if isinstance(params, RotateParams):
        return apply_rotation(vol, params.angles_deg)
    if isinstance(params, ScaleParams):
        return apply_scale(vol, params.factors)
    if isinstance(params, BrightnessParams):
        return apply_brightness(vol, params.gain, params.gamma)
    if isinstance(params, ElasticParams):
        return apply_elastic(vol, params.grid)
    if isinstance(params, NoParams):
        return vol
    if isinstance(params, ComposeParams):
        for p in params.members:
            vol = apply_params(vol, p)
        return vol
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def _members(spec: AugmentSpec) -> List[AugmentSpec]:
    return list(spec.specs) if isinstance(spec, Compose) else [spec]


def draw_pipeline(spec: AugmentSpec, rng: RngStream) -> List[DrawnParams]:
    """Parameters for each pipeline member, member ``i`` drawn from ``rng.child(i)``.

    A bare spec behaves as a one-member composition, so ``X`` and
    ``Compose([X])`` draw identically.
    """
    return [draw(s, rng.child(i)) for i, s in enumerate(_members(spec))]


def apply_pipeline(vol: Volume3, spec: AugmentSpec, rng: RngStream) -> Volume3:
    out, _ = augment_with_params(vol, spec, rng)
    return out


def augment_with_params(vol: Volume3, spec: AugmentSpec, rng: RngStream):
    """Like :func:`apply_pipeline` but also returns the drawn parameters."""
    if isinstance(spec, NoAugment):
        return vol, [NoParams()]
    params = draw_pipeline(spec, rng)
    for p in params:
        vol = apply_params(vol, p)
    return vol, params
