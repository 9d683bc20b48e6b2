"""
Finite-difference self-check of the autodiff engine.

Every differentiable op is checked on seeded random inputs, then every
parameter of a micro captioning model is checked through the full
teacher-forced cross-entropy loss.
"""

import logging
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from src.core.exceptions import GradientCheckError
from src.core.rng import SeedStreams, derive_seed
from src.domain.run_models import ModelConfig
from src.domain.scene_models import RESERVED_WORDS, Box, Proposal, Scene, Vocabulary
from src.infra.latgeo_core.factory import build_model
from src.infra.numeric import ops
from src.infra.numeric.gradcheck import GradCheckResult, check_gradients
from src.infra.numeric.tensor import Tensor, no_grad
from src.services.training_service import teacher_forced, xe_loss

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
MICRO_WORDS = ("a", "cat", "dog", "car", "big", "small", "left", "of")
MICRO_CAPTION = "a big cat left of a small dog"

OpCase = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


class GradCheckReport(BaseModel):
    cases: int = Field(..., ge=0, description="Seeded cases per op and micro models checked")
    results: list[GradCheckResult] = Field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst(self) -> Optional[GradCheckResult]:
        return max(self.results, key=lambda r: r.max_rel_error, default=None)

    @property
    def failures(self) -> list[GradCheckResult]:
        return [r for r in self.results if not r.passed]


def _param(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    """Entries in ±[0.1, 1] so kinks at 0 are never crossed by a 1e-5 step."""
    magnitude = rng.uniform(0.1, 1.0, size=shape)
    return Tensor(magnitude * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalar loss sum(out * R) for a fixed random R of the output's shape."""
    with no_grad():
        shape = out_fn().shape
    weights = Tensor(rng.standard_normal(shape))
    return lambda: ops.sum(ops.mul(out_fn(), weights))


def _unary(op: Callable[[Tensor], Tensor], make=_param) -> OpCase:
    def case(rng):
        x = make(rng, 3, 4)
        return _projected(lambda: op(x), rng), {"x": x}
    return case


def _binary(op: Callable[[Tensor, Tensor], Tensor], b_shape: tuple[int, ...] = (3, 4)) -> OpCase:
    def case(rng):
        a, b = _param(rng, 3, 4), _param(rng, *b_shape)
        return _projected(lambda: op(a, b), rng), {"a": a, "b": b}
    return case


def _matmul(rng):
    a, b = _param(rng, 3, 5), _param(rng, 5, 2)
    return _projected(lambda: ops.matmul(a, b), rng), {"a": a, "b": b}


def _softmax(rng):
    x, bias = _param(rng, 4, 5, low=-2, high=2), _param(rng, 4, 5, low=0.5, high=2.0)
    mask = rng.random((4, 5)) > 0.3
    mask[:, 0] = True
    return _projected(lambda: ops.softmax_rows(x, mask, bias), rng), {"x": x, "bias": bias}


def _log_softmax(rng):
    x = _param(rng, 4, 5, low=-2, high=2)
    weights = Tensor(rng.standard_normal((4, 5)))
    return lambda: ops.sum(ops.mul(ops.log_softmax_rows(x), weights)), {"x": x}


def _layer_norm(rng):
    x, gain, bias = _param(rng, 3, 6), _param(rng, 6), _param(rng, 6)
    return _projected(lambda: ops.layer_norm(x, gain, bias), rng), {"x": x, "gain": gain, "bias": bias}


def _embed(rng):
    table = _param(rng, 6, 4)
    ids = [int(i) for i in rng.integers(0, 6, size=5)] + [2, 2]
    return _projected(lambda: ops.embed_lookup(table, ids), rng), {"table": table}


def _add_bias(rng):
    x, bias = _param(rng, 3, 4), _param(rng, 4)
    return _projected(lambda: ops.add_bias(x, bias), rng), {"x": x, "bias": bias}


def _scale_rows(rng):
    x, factors = _param(rng, 3, 4), _param(rng, 3)
    return _projected(lambda: ops.scale_rows(x, factors), rng), {"x": x, "factors": factors}


def _concat(rng):
    a, b, c = _param(rng, 3, 2), _param(rng, 3, 3), _param(rng, 2, 5)
    fn = lambda: ops.concat_rows([ops.concat_cols([a, b]), c])  # noqa: E731
    return _projected(fn, rng), {"a": a, "b": b, "c": c}


def _slices(rng):
    x = _param(rng, 4, 5)
    fn = lambda: ops.slice_rows(ops.slice_cols(x, 1, 4), 1, 3)  # noqa: E731
    return _projected(fn, rng), {"x": x}


def _take(rng):
    x = _param(rng, 4, 5)
    rows, cols = [0, 1, 3, 3], [4, 0, 2, 2]
    return _projected(lambda: ops.take(x, rows, cols), rng), {"x": x}


def _reductions(rng):
    x = _param(rng, 3, 4)
    return lambda: ops.mul(ops.sum(ops.mul(x, x)), ops.mean(ops.exp(x))), {"x": x}


OP_CASES: dict[str, OpCase] = {
    "matmul": _matmul,
    "softmax_rows": _softmax,
    "log_softmax_rows": _log_softmax,
    "relu": _unary(ops.relu, _away_from_zero),
    "sigmoid": _unary(ops.sigmoid),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, lambda rng, *s: _param(rng, *s, low=0.5, high=2.0)),
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "mul_scalar": _binary(ops.mul, ()),
    "scale": _unary(lambda x: ops.scale(x, -2.5)),
    "transpose": _unary(ops.transpose),
    "reshape": _unary(lambda x: ops.reshape(x, (2, 6))),
    "layer_norm": _layer_norm,
    "embed_lookup": _embed,
    "add_bias": _add_bias,
    "scale_rows": _scale_rows,
    "concat": _concat,
    "slice": _slices,
    "take": _take,
    "sum_mean": _reductions,
}


def check_ops(cases: int = 100, seed: int = 0, tolerance: float = TOLERANCE) -> list[GradCheckResult]:
    """Worst result per op and input over `cases` seeded draws."""
    worst: dict[str, GradCheckResult] = {}
    quiet = not logger.isEnabledFor(logging.INFO)
    for index, (name, make_case) in enumerate(tqdm(OP_CASES.items(), desc="ops", unit="op", disable=quiet)):
        for case in range(cases):
            rng = np.random.default_rng(derive_seed(seed, index, case))
            loss_fn, inputs = make_case(rng)
            _keep_worst(worst, name, check_gradients(loss_fn, inputs, tolerance=tolerance))
    return list(worst.values())


def _keep_worst(worst: dict[str, GradCheckResult], prefix: str, results: list[GradCheckResult]) -> None:
    for result in results:
        key = f"{prefix}.{result.name}"
        if key not in worst or result.max_rel_error > worst[key].max_rel_error:
            worst[key] = result.model_copy(update={"name": key})


# --- Micro model ---

def micro_vocabulary() -> Vocabulary:
    return Vocabulary(words=[*RESERVED_WORDS, *MICRO_WORDS], min_count=0)


def micro_config(**overrides) -> ModelConfig:
    values = dict(
        d_model=16, heads=2, layers=2, memory_slots=2, d_feat=8,
        max_len=8, dropout=0.0, vocab_size=len(RESERVED_WORDS) + len(MICRO_WORDS),
    )
    values.update(overrides)
    return ModelConfig(**values)


def micro_scene(rng: np.random.Generator, n_objects: int = 3, d_feat: int = 8) -> Scene:
    width, height = 64.0, 48.0
    proposals = []
    for word in rng.choice(["cat", "dog", "car"], size=n_objects):
        w, h = rng.uniform(4, 30), rng.uniform(4, 20)
        proposals.append(Proposal(
            box=Box(x=rng.uniform(w / 2, width - w / 2), y=rng.uniform(h / 2, height - h / 2), w=w, h=h),
            class_word=str(word),
            class_prob=float(rng.uniform(0.75, 1.0)),
            feature=rng.standard_normal(d_feat).tolist(),
        ))
    return Scene(
        id="micro",
        image_w=width,
        image_h=height,
        proposals=proposals,
        background=rng.standard_normal(d_feat).tolist(),
        refs=[MICRO_CAPTION],
    )


def check_micro_model(
    seed: int = 0,
    tolerance: float = TOLERANCE,
    max_coords: Optional[int] = 6,
    prefix_len: int = 4,
    **overrides,
) -> list[GradCheckResult]:
    """
    Check every parameter of a micro model (N=3, d_model=16, L=2, h=2, M=2, V=12)
    through the smoothed cross-entropy of a teacher-forced prefix.
    """
    vocab = micro_vocabulary()
    streams = SeedStreams(seed)
    model = build_model(micro_config(**overrides), vocab, streams).eval()
    scene = micro_scene(streams.get("data"))
    reference = vocab.encode(MICRO_CAPTION)[: prefix_len + 1]

    def loss_fn() -> Tensor:
        logits, targets = teacher_forced(model, model.encode(scene), reference)
        return xe_loss(logits, targets, smoothing=0.1)

    return check_gradients(
        loss_fn,
        dict(model.named_parameters()),
        tolerance=tolerance,
        max_coords=max_coords,
        rng=streams.get("sampling"),
    )


def check_micro_models(
    cases: int = 100,
    seed: int = 0,
    tolerance: float = TOLERANCE,
    max_coords: Optional[int] = 6,
) -> list[GradCheckResult]:
    """Worst result per parameter over `cases` micro models, each with its own seed and scene."""
    worst: dict[str, GradCheckResult] = {}
    quiet = not logger.isEnabledFor(logging.INFO)
    for case in tqdm(range(cases), desc="micro model", unit="case", disable=quiet):
        _keep_worst(worst, "model", check_micro_model(derive_seed(seed, case), tolerance, max_coords))
    return list(worst.values())


def run_gradcheck(
    cases: int = 100,
    seed: int = 0,
    tolerance: float = TOLERANCE,
    max_coords: Optional[int] = 6,
) -> GradCheckReport:
    """Op suite plus micro model; logs every failing tensor."""
    results = check_ops(cases, seed, tolerance)
    results += check_micro_models(cases, seed, tolerance, max_coords)
    report = GradCheckReport(cases=cases, results=results, tolerance=tolerance)

    for failure in report.failures:
        logger.error(f"gradcheck FAILED {failure.name}: rel err {failure.max_rel_error:.3e}")
    worst = report.worst
    if worst is not None:
        logger.info(
            f"gradcheck: {len(results)} tensors, {len(report.failures)} failures, "
            f"worst {worst.name} at {worst.max_rel_error:.3e}"
        )
    return report


def require_passing(report: GradCheckReport) -> None:
    """
    Raises:
        GradientCheckError: If any tensor exceeds the tolerance
    """
    if not report.passed:
        names = ", ".join(f.name for f in report.failures[:10])
        raise GradientCheckError(
            f"{len(report.failures)} gradients exceed rel err {report.tolerance:g}: {names}"
        )
