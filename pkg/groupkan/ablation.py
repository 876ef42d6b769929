"""Ablation sweeps: each variant is built, trained and scored on the same data."""

import csv
import enum
import logging
from typing import Dict, List, Sequence

from .common import BaseModel
from .config import GroupKanConfig, RunConfig, TokenActivation, TransformKind
from .data import Sample
from .model import build, count_params
from .training import train

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ("axis", "variant", "params", "gkt_spline_params", "val_iou", "val_f1")

MAX_GKT_DEPTH = 5

# Group counts tried by the groups sweep, before filtering by divisibility.
GROUP_CHOICES = (1, 2, 4, 8, 16)


@enum.unique
class AblationAxis(str, enum.Enum):
    GKT_DEPTH = "gkt_depth"
    GKT_VS_MLP = "gkt_vs_mlp"
    GROUPS = "groups"
    ACTIVATION = "activation"
    GKT_COMPONENTS = "gkt_components"


class AblationRow(BaseModel):
    axis: str
    variant: str
    params: int
    gkt_spline_params: int
    val_iou: float
    val_f1: float


def _depth_variants(base: GroupKanConfig) -> Dict[str, dict]:
    return {
        f"{depth}_layer": dict(gkt_layers=depth, layer_kinds=None)
        for depth in range(1, MAX_GKT_DEPTH + 1)
    }


def _mlp_variants(base: GroupKanConfig) -> Dict[str, dict]:
    gkt, mlp = TransformKind.GKT.value, TransformKind.MLP.value
    layouts = {
        "gkt_x3": [gkt, gkt, gkt],
        "mlp_gkt_gkt": [mlp, gkt, gkt],
        "gkt_mlp_gkt": [gkt, mlp, gkt],
        "gkt_gkt_mlp": [gkt, gkt, mlp],
        "mlp_x3": [mlp, mlp, mlp],
    }
    return {name: dict(gkt_layers=3, layer_kinds=kinds) for name, kinds in layouts.items()}


def _group_variants(base: GroupKanConfig) -> Dict[str, dict]:
    valid = [g for g in GROUP_CHOICES if base.c2 % g == 0 and base.c3 % g == 0]
    return {
        f"gka{gka}_gkt{gkt}": dict(gka_groups=gka, gkt_groups=gkt)
        for gka in valid
        for gkt in valid
    }


def _activation_variants(base: GroupKanConfig) -> Dict[str, dict]:
    return {kind.value: dict(token_activation=kind.value) for kind in TokenActivation}


def _component_variants(base: GroupKanConfig) -> Dict[str, dict]:
    return {
        "full": {},
        "no_pwconv": dict(gkt_pwconv=False),
        "no_dwconv": dict(gkt_dwconv=False),
        "no_gkt": dict(gkt_spline=False),
    }


VARIANTS = {
    AblationAxis.GKT_DEPTH.value: _depth_variants,
    AblationAxis.GKT_VS_MLP.value: _mlp_variants,
    AblationAxis.GROUPS.value: _group_variants,
    AblationAxis.ACTIVATION.value: _activation_variants,
    AblationAxis.GKT_COMPONENTS.value: _component_variants,
}


def variant_configs(axis: str, base: GroupKanConfig) -> Dict[str, GroupKanConfig]:
    """Model configs of every variant on `axis`, derived from `base`."""
    builder = VARIANTS[AblationAxis(axis).value]
    values = base.dict()
    return {
        name: GroupKanConfig(**{**values, **changes}) for name, changes in builder(base).items()
    }


def run_ablation(axis: str, run: RunConfig, samples: Sequence[Sample]) -> List[AblationRow]:
    rows = []
    for name, config in variant_configs(axis, run.model).items():
        net = build(config)
        params = count_params(net)
        logger.info("Ablation %s/%s: %d params", axis, name, params.total)
        result = train(net, samples, run.train, run.loss)
        rows.append(
            AblationRow(
                axis=axis,
                variant=name,
                params=params.total,
                gkt_spline_params=params.gkt_spline,
                val_iou=result.best_val_iou,
                val_f1=result.best_val_f1,
            )
        )
    return rows


def write_ablation(path: str, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="", encoding="utf8") as fp:
        writer = csv.DictWriter(fp, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.dict())
