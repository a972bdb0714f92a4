"""Desk-scale QAT sensitivity profiling on toy quantized linear models.

The toy task is regression against a frozen random teacher: the student
starts as an exact copy, so the full-precision loss is identically zero and
every loss gap is attributable to quantization. Profiling quantizes one
layer at a time at each candidate bit width, briefly trains only that
layer's parameters with straight-through gradients, and records the
validation loss gap on a fixed pool.

Quantized layers run the full pipeline forward: the weight is transformed,
a low-rank branch (if enabled) captures the top singular structure at
enable time, the residual against that frozen anchor is ternarized each
step from the live float shadow, and activations pass through the per-token
Gauss quantizer. Both quantizers backpropagate as identity; the low-rank
factors and everything outside a quantizer receive exact chain-rule
gradients, which is what the finite-difference checks pin down.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, replace

import numpy as np

from .allocator import AllocationProblem, dp_allocate
from .errors import DimensionError, ValidationError
from .hadamard import HadamardPlan, fold_into_weights, transform_tokens
from .lowrank import truncated_svd
from .quant import GaussCodebook, lloyd_max, quantize_tokens, ternarize, uniform_gauss_codebook
from .tensorio import LayerSpec, SensitivityTable

FP_BITS = 32


@dataclass
class TrainConfig:
    """Short-QAT hyperparameters; steps = 0 degenerates to pure PTQ."""

    steps: int = 1000
    learning_rate: float = 1e-3
    batch: int = 32
    seed: int = 42
    optimizer: str = "adam"

    def __post_init__(self):
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


class ToyLayer:
    """One linear layer with an optional quantized forward path."""

    def __init__(self, weight: np.ndarray):
        self.weight = np.array(weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise DimensionError(f"weight must be 2-D, got shape {self.weight.shape}")
        self.a_bits: int | None = None
        self.plan: HadamardPlan | None = None
        self.codebook: GaussCodebook | None = None
        self.center = True
        self.A: np.ndarray | None = None
        self.B: np.ndarray | None = None
        self.anchor: np.ndarray | None = None  # frozen A0 @ B0 residual reference

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def quantized(self) -> bool:
        return self.a_bits is not None

    @property
    def rank(self) -> int:
        return 0 if self.A is None else self.A.shape[1]

    def enable_quant(
        self,
        bits: int,
        rank: int = 0,
        uniform: bool = True,
        center: bool = True,
        seed: int = 0,
    ) -> None:
        """Switch this layer to the quantized path at ``bits`` activation bits.

        bits >= 32 keeps the layer on the exact dense path. The low-rank
        branch is initialized from the transformed weight's top singular
        structure; its product at enable time anchors the residual, so the
        factors train freely without re-entering the weight quantizer.
        """
        if bits >= FP_BITS:
            return
        if not 1 <= bits <= 8:
            raise ValidationError(f"activation bits must be in 1..8 or 32, got {bits}")
        self.a_bits = bits
        self.center = center
        self.plan = HadamardPlan.for_dim(self.in_dim)
        self.codebook = uniform_gauss_codebook(bits) if uniform else lloyd_max(bits)
        if rank > 0:
            rank = min(rank, min(self.weight.shape))
            wh = fold_into_weights(self.weight, self.plan)
            u, s, v = truncated_svd(wh, rank, seed=seed)
            self.A = u * s
            self.B = v.T
            self.anchor = self.A @ self.B
        else:
            self.A = self.B = self.anchor = None

    def params(self) -> dict[str, np.ndarray]:
        out = {"weight": self.weight}
        if self.A is not None:
            out["A"] = self.A
            out["B"] = self.B
        return out

    def forward(self, x: np.ndarray, frozen: dict | None = None):
        """Returns (y, cache). ``frozen`` pins the quantizer decisions of a
        reference forward (ternary values, activation codes and statistics),
        leaving only the smooth parts live; used by gradient oracles."""
        if not self.quantized:
            return x @ self.weight.T, {"x": x}
        xh = transform_tokens(x, self.plan)
        if frozen is None:
            deq, codes, mu, sigma = quantize_tokens(xh, self.codebook, center=self.center)
        else:
            codes, mu, sigma = frozen["codes"], frozen["mu"], frozen["sigma"]
            deq = sigma[:, None] * self.codebook.levels[codes]
            if self.center:
                deq = deq + mu[:, None]
        wh = fold_into_weights(self.weight, self.plan)
        residual = wh if self.anchor is None else wh - self.anchor
        if frozen is None:
            tern = ternarize(residual)
            values, alpha = tern.values, float(tern.alpha)
        else:
            values = frozen["values"]
            alpha = float(np.mean(np.abs(residual)))
        wq = alpha * values.astype(np.float64)
        y = deq @ wq.T
        if self.A is not None:
            y = y + xh @ self.B.T @ self.A.T
        cache = {"x": x, "xh": xh, "deq": deq, "wq": wq,
                 "codes": codes, "mu": mu, "sigma": sigma, "values": values}
        return y, cache

    def backward(self, gy: np.ndarray, cache: dict):
        """Straight-through gradients: both quantizers behave as identity,
        so the residual inherits the dequantized-product gradient and the
        transformed activation inherits the output-side chain."""
        if not self.quantized:
            return {"weight": gy.T @ cache["x"]}, gy @ self.weight
        g_residual = gy.T @ cache["deq"]
        grads = {"weight": fold_into_weights(g_residual, self.plan)}
        g_xh = gy @ cache["wq"]
        if self.A is not None:
            proj = cache["xh"] @ self.B.T
            grads["A"] = gy.T @ proj
            grads["B"] = self.A.T @ gy.T @ cache["xh"]
            g_xh = g_xh + gy @ self.A @ self.B
        gx = transform_tokens(g_xh, self.plan)
        return grads, gx

    def snapshot(self, cache: dict) -> dict:
        return {k: cache[k] for k in ("codes", "mu", "sigma", "values")}


def ste_linear_forward_backward(layer: ToyLayer, x: np.ndarray, upstream: np.ndarray):
    """One layer's quantized forward and its straight-through backward.

    Returns (output, weight_grads, input_grad) where weight_grads is a dict
    with "weight" and, for layers with a branch, "A" and "B".
    """
    x = np.asarray(x, dtype=np.float64)
    y, cache = layer.forward(x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != y.shape:
        raise DimensionError(f"upstream shape {upstream.shape} != output shape {y.shape}")
    grads, gx = layer.backward(upstream, cache)
    return y, grads, gx


@dataclass
class ToyModel:
    """Trainable student layers plus the frozen teacher they regress onto."""

    layers: list[ToyLayer]
    teacher: list[np.ndarray]

    def copy(self) -> "ToyModel":
        return _copy.deepcopy(self)

    def target(self, x: np.ndarray) -> np.ndarray:
        h = x
        for w in self.teacher:
            h = h @ w.T
        return h

    def forward(self, x: np.ndarray, frozen: list[dict | None] | None = None):
        h = x
        caches = []
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h, None if frozen is None else frozen[i])
            caches.append(cache)
        return h, caches

    def loss(self, x: np.ndarray, frozen: list[dict | None] | None = None) -> float:
        y, _ = self.forward(x, frozen)
        t = self.target(x)
        return float(np.mean((y - t) ** 2))

    def loss_and_grads(self, x: np.ndarray, trainable: set[int]):
        y, caches = self.forward(x)
        t = self.target(x)
        diff = y - t
        loss = float(np.mean(diff**2))
        gy = (2.0 / diff.size) * diff
        grads: dict[int, dict[str, np.ndarray]] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer_grads, gy = self.layers[i].backward(gy, caches[i])
            if i in trainable:
                grads[i] = layer_grads
        return loss, grads

    def snapshots(self, x: np.ndarray) -> list[dict | None]:
        _, caches = self.forward(x)
        return [
            layer.snapshot(c) if layer.quantized else None
            for layer, c in zip(self.layers, caches)
        ]


@dataclass
class ToyData:
    """Gaussian inputs: a fixed validation pool plus a fresh-batch sampler."""

    in_dim: int
    val_inputs: np.ndarray
    seed: int = 0

    def train_batch(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return rng.standard_normal((batch, self.in_dim))


def make_toy_model(widths: tuple[int, ...], seed: int = 0) -> ToyModel:
    """Random teacher of len(widths)-1 linear layers; student starts equal.

    Widths should be powers of two in 32..128 for the fast-transform path,
    though any positive sizes work.
    """
    if len(widths) < 2:
        raise ValidationError("need at least one layer (two widths)")
    rng = np.random.default_rng(seed)
    teacher = [
        rng.standard_normal((widths[i + 1], widths[i])) / np.sqrt(widths[i])
        for i in range(len(widths) - 1)
    ]
    return ToyModel(layers=[ToyLayer(w) for w in teacher], teacher=[w.copy() for w in teacher])


def make_toy_data(in_dim: int, seed: int = 0, pool: int = 1000) -> ToyData:
    rng = np.random.default_rng([seed, 0xDA7A])
    return ToyData(in_dim=in_dim, val_inputs=rng.standard_normal((pool, in_dim)), seed=seed)


class _Adam:
    def __init__(self, lr: float):
        self.lr = lr
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = self.b1 * self.m[key] + (1 - self.b1) * g
            self.v[key] = self.b2 * self.v[key] + (1 - self.b2) * g * g
            mhat = self.m[key] / (1 - self.b1**self.t)
            vhat = self.v[key] / (1 - self.b2**self.t)
            params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for key, g in grads.items():
            params[key] -= self.lr * g


def _make_optimizer(config: TrainConfig):
    return _Adam(config.learning_rate) if config.optimizer == "adam" else _Sgd(config.learning_rate)


def _train(model: ToyModel, data: ToyData, trainable: set[int],
           config: TrainConfig, rng: np.random.Generator) -> None:
    if config.steps == 0 or not trainable:
        return
    opt = _make_optimizer(config)
    flat_params = {}
    for i in trainable:
        for name, arr in model.layers[i].params().items():
            flat_params[(i, name)] = arr
    for _ in range(config.steps):
        x = data.train_batch(rng, config.batch)
        _, grads = model.loss_and_grads(x, trainable)
        flat_grads = {(i, n): g for i, layer_grads in grads.items() for n, g in layer_grads.items()}
        opt.step(flat_params, flat_grads)


def _layer_specs(model: ToyModel) -> list[LayerSpec]:
    raw = [layer.out_dim * layer.in_dim for layer in model.layers]
    mean_flops = sum(raw) / len(raw)
    return [
        LayerSpec(name=f"fc{i}", in_dim=layer.in_dim, out_dim=layer.out_dim,
                  flops_weight=raw[i] / mean_flops)
        for i, layer in enumerate(model.layers)
    ]


def profile_sensitivity(
    model: ToyModel,
    data: ToyData,
    bits: tuple[int, ...],
    config: TrainConfig,
    rank: int = 0,
    uniform: bool = True,
) -> SensitivityTable:
    """Per-layer, per-bit loss gaps after short QAT (Algorithm: quantize one
    layer, freeze the rest, train briefly, evaluate on the fixed pool).

    Each (layer, bit) cell derives its own generator from (seed, layer, bit),
    so the table is identical no matter how cells are scheduled. Bit width 32
    means no quantization: the gap is exactly zero by construction.
    """
    bits = tuple(sorted(bits))
    base_loss = model.loss(data.val_inputs)
    gaps = np.zeros((len(model.layers), len(bits)))
    for li in range(len(model.layers)):
        for bi, b in enumerate(bits):
            if b >= FP_BITS:
                gaps[li, bi] = 0.0
                continue
            trial = model.copy()
            trial.layers[li].enable_quant(b, rank=rank, uniform=uniform, seed=config.seed)
            rng = np.random.default_rng([config.seed, li, b])
            _train(trial, data, {li}, config, rng)
            gaps[li, bi] = trial.loss(data.val_inputs) - base_loss
    return SensitivityTable(layers=_layer_specs(model), bits=list(bits), delta_loss=gaps)


def steps_sweep(
    model: ToyModel,
    data: ToyData,
    step_grid: tuple[int, ...],
    bits: tuple[int, ...] = (1, 2, 3, 4),
    target_avg_bits: float = 2.0,
    config: TrainConfig | None = None,
    full_steps: int = 2000,
    rank: int = 0,
    uniform: bool = True,
) -> list[dict]:
    """Final convergence loss of the mixed-precision model built from
    sensitivity tables collected at each profiling-step count.

    For each grid entry s: profile at s steps, allocate bits under the
    target budget, quantize every layer accordingly, then train the whole
    model and record its initial and final validation loss.
    """
    if not step_grid:
        raise ValidationError("step grid must be nonempty")
    config = config or TrainConfig()
    rows = []
    for s in step_grid:
        table = profile_sensitivity(model, data, bits, replace(config, steps=s),
                                    rank=rank, uniform=uniform)
        alloc = dp_allocate(AllocationProblem(table, target_avg_bits, bit_set=bits))
        trial = model.copy()
        for i, layer in enumerate(trial.layers):
            layer.enable_quant(alloc.bits_per_layer[f"fc{i}"], rank=rank,
                               uniform=uniform, seed=config.seed)
        initial = trial.loss(data.val_inputs)
        rng = np.random.default_rng([config.seed, 0xF0, s])
        _train(trial, data, set(range(len(trial.layers))),
               replace(config, steps=full_steps), rng)
        final = trial.loss(data.val_inputs)
        rows.append({"steps": s, "initial_loss": initial, "final_loss": final,
                     "bits": dict(alloc.bits_per_layer)})
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    """Persist steps_sweep output as ``steps,initial_loss,final_loss``."""
    with open(path, "w", newline="") as fh:
        fh.write("steps,initial_loss,final_loss\n")
        for row in rows:
            fh.write(f"{row['steps']},{row['initial_loss']!r},{row['final_loss']!r}\n")
