"""Parameter presets and phantoms for the perfusion experiments."""
import numpy as np

from .core import BLOCKS, ParameterSet, RegularizerConfig

# Simulation values of the reconstruction experiments (rates in 1/s).
REFERENCE_VALUES = {
    "k1": 0.9, "k2": 0.75, "k3": 0.9,
    "vA_x": 1e-4, "vA_y": 700.0,
    "vT_x": -50.0, "vT_y": 1e-4,
    "vV_x": 1e-4, "vV_y": 700.0,
    "dA": 3e-7, "dT": 3e-6, "dV": 3e-7,
}

# A-priori values and regularization weights suggested for measured data.
PRIOR_VALUES = {
    "k1": 0.89, "k2": 0.7, "k3": 0.85,
    "vA_x": 0.1, "vA_y": 15.0,
    "vT_x": -5.0, "vT_y": 0.1,
    "vV_x": 0.1, "vV_y": 15.0,
    "dA": 1e-3, "dT": 1e-2, "dV": 1e-3,
}
PRIOR_WEIGHTS = {
    "k1": 0.0171, "k2": 0.0158, "k3": 0.0164,
    "vA_x": 0.0010, "vA_y": 1.1000,
    "vT_x": 1.1220, "vT_y": 0.0010,
    "vV_x": 0.0010, "vV_y": 1.1000,
    "dA": 0.0003, "dT": 0.0003, "dV": 0.0003,
}
SMOOTHING_WEIGHTS = {
    "k1": 0.0008, "k2": 0.0001, "k3": 0.0001,
    "vA_x": 0.0001, "vA_y": 0.0001,
    "vT_x": 0.0001, "vT_y": 0.0001,
    "vV_x": 0.0001, "vV_y": 0.0001,
    "dA": 0.0004, "dT": 0.0004, "dV": 0.0004,
}

# Prior of the desk experiments: reference transport, a-priori rates.
DESK_PRIOR = dict(REFERENCE_VALUES, k1=PRIOR_VALUES["k1"], k2=PRIOR_VALUES["k2"],
                  k3=PRIOR_VALUES["k3"])

PRESETS = ("constant", "edge_defect", "inner_defect")


def defect_mask(name, grid, strip_fraction=0.1, block_fraction=0.2, strip_edge="left"):
    """Boolean ``(ny, nx)`` mask of the defect region of a phantom."""
    mask = np.zeros(grid.shape, dtype=bool)
    if name == "constant":
        return mask
    if name == "edge_defect":
        n_across = grid.nx if strip_edge in ("left", "right") else grid.ny
        w = max(1, int(round(strip_fraction * n_across)))
        sl = {"left": np.s_[:, :w], "right": np.s_[:, -w:],
              "top": np.s_[:w, :], "bottom": np.s_[-w:, :]}[strip_edge]
        mask[sl] = True
        return mask
    if name == "inner_defect":
        wx = max(1, int(round(block_fraction * grid.nx)))
        wy = max(1, int(round(block_fraction * grid.ny)))
        x0 = (grid.nx - wx) // 2
        y0 = (grid.ny - wy) // 2
        mask[y0:y0 + wy, x0:x0 + wx] = True
        return mask
    raise KeyError(f"unknown phantom preset {name!r}; choose from {PRESETS}")


def phantom(name, grid, values=None, **mask_kw):
    """Parameter phantom: ``values`` (default :data:`REFERENCE_VALUES`) everywhere,
    with ``k1 = k2 = 0`` inside the defect of the ``edge_defect`` and
    ``inner_defect`` presets."""
    values = dict(REFERENCE_VALUES if values is None else values)
    mask = defect_mask(name, grid, **mask_kw)
    p = ParameterSet.constant(grid, **values)
    if not mask.any():
        return p
    k1 = np.where(mask, 0.0, p.k1)
    k2 = np.where(mask, 0.0, p.k2)
    return p.replace(k1=k1, k2=k2)


def reference_regularizer(grid, prior=None):
    """Regularizer with the reference weights, centred on ``prior``
    (a dict of block values, default :data:`PRIOR_VALUES`)."""
    prior = dict(PRIOR_VALUES if prior is None else prior)
    return RegularizerConfig(ParameterSet.constant(grid, **prior),
                             alpha=PRIOR_WEIGHTS, xi=SMOOTHING_WEIGHTS)


def block_dict(values):
    return {name: float(v) for name, v in zip(BLOCKS, values)}
