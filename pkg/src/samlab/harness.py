"""Experiment harness: full training runs, the toy comparison, reports.

A run is fully determined by (config, seed): data generation, weight
initialization, per-epoch shuffles and the optimizer trajectory all draw
from seeded streams, and reports serialize losslessly so reruns can be
compared bit for bit (wall time aside).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import data as data_mod
from .data import ArrayPairs, ToySpec, WindowedDataset, batches, generate_toy
from .diagnostics import (
    AttentionStats,
    SharpnessReport,
    attention_entropy,
    lambda_max,
    oracle_least_squares,
)
from .errors import ConfigError, FormatError
from .linalg import Rng, nuclear_norm
from .model import (
    AttentionVariant,
    ModelDims,
    ModelOptions,
    ModelParams,
    forward,
    backward,
    gradients_to_vector,
    init_params,
    param_slices,
    params_to_vector,
    vector_to_params,
)
from .optim import (
    EarlyStop,
    OptState,
    SamConfig,
    base_step,
    cosine_lr,
    early_stop_update,
    mae_metric,
    mse_loss_and_grad,
    sam_step,
)

# Published per-dataset learning rates; everything else defaults to 1e-3.
DEFAULT_LR = {
    "etth1": 1e-3, "etth2": 1e-3, "ettm1": 1e-3, "ettm2": 1e-3,
    "electricity": 1e-4, "exchange": 1e-3, "traffic": 1e-4, "weather": 1e-4,
    "toy": 1e-3,
}

# Best neighborhood radii per (dataset, horizon); 0.5 when unlisted.
DEFAULT_RHO = {
    ("etth1", 96): 0.5, ("etth1", 192): 0.6, ("etth1", 336): 0.9, ("etth1", 720): 0.9,
    ("etth2", 96): 0.5, ("etth2", 192): 0.8, ("etth2", 336): 0.6, ("etth2", 720): 0.8,
    ("ettm1", 96): 0.6, ("ettm1", 192): 0.9, ("ettm1", 336): 0.9, ("ettm1", 720): 0.9,
    ("ettm2", 96): 0.2, ("ettm2", 192): 0.9, ("ettm2", 336): 0.8, ("ettm2", 720): 0.9,
    ("electricity", 96): 0.5, ("electricity", 192): 0.6,
    ("electricity", 336): 0.5, ("electricity", 720): 1.0,
    ("exchange", 96): 0.7, ("exchange", 192): 0.8,
    ("exchange", 336): 0.5, ("exchange", 720): 0.9,
    ("traffic", 96): 0.8, ("traffic", 192): 0.1,
    ("traffic", 336): 0.5, ("traffic", 720): 0.7,
    ("weather", 96): 0.4, ("weather", 192): 0.4,
    ("weather", 336): 0.6, ("weather", 720): 0.5,
}
FALLBACK_RHO = 0.5
TOY_RHO = 0.9
TOY_DATA_SEED = 1234


@dataclass
class TrainConfig:
    dataset: str = "toy"  # "toy" or a CSV path
    lookback: int = 512
    horizon: int = 96
    d_model: int = 16
    batch_size: int = 32
    epochs: int = 300
    patience: int = 5
    lr: float | None = None  # resolved per dataset when omitted
    rho: float | None = None  # resolved per (dataset, horizon) when omitted
    optimizer: str = "adam"
    seed: int = 0
    attention: AttentionVariant = AttentionVariant.CHANNEL_WISE
    revin: bool = True
    sigma_reparam: bool = False
    sam: bool = True
    random_transformer: bool = False
    sam_perturbs_revin: bool = True
    weight_decay: float = 1e-4
    revin_eps: float = 1e-5
    # toy-data knobs (ignored for CSV datasets)
    toy_channels: int = 7
    toy_n_train: int = 10_000
    toy_n_val: int = 5_000
    toy_noise: float = 1.0
    data_seed: int = TOY_DATA_SEED


def dataset_key(dataset: str) -> str:
    stem = dataset.replace("\\", "/").rsplit("/", 1)[-1]
    stem = stem.rsplit(".", 1)[0].lower()
    return stem


def resolve_lr(config: TrainConfig) -> float:
    if config.lr is not None:
        return config.lr
    return DEFAULT_LR.get(dataset_key(config.dataset), 1e-3)


def resolve_rho(config: TrainConfig) -> float:
    if config.rho is not None:
        return config.rho
    if not config.sam:
        return 0.0
    key = dataset_key(config.dataset)
    if key == "toy":
        return TOY_RHO
    return DEFAULT_RHO.get((key, config.horizon), FALLBACK_RHO)


@dataclass
class DataBundle:
    train: object
    val: object
    test: object
    channels: int
    toy: data_mod.ToyData | None = None


_TOY_CACHE: dict = {}


def _toy_bundle(config: TrainConfig) -> DataBundle:
    key = (config.lookback, config.horizon, config.toy_channels,
           config.toy_n_train, config.toy_n_val, config.toy_noise, config.data_seed)
    if key not in _TOY_CACHE:
        _TOY_CACHE.clear()  # one working set at a time; paper scale is large
        spec = ToySpec(lookback=config.lookback, horizon=config.horizon,
                       channels=config.toy_channels, n_train=config.toy_n_train,
                       n_val=config.toy_n_val, noise_scale=config.toy_noise,
                       seed=config.data_seed)
        _TOY_CACHE[key] = generate_toy(spec)
    toy = _TOY_CACHE[key]
    # the toy problem has no third split; the validation pairs double as the
    # held-out evaluation set
    return DataBundle(train=toy.train, val=toy.val, test=toy.val,
                      channels=config.toy_channels, toy=toy)


def load_bundle(config: TrainConfig) -> DataBundle:
    if config.dataset == "toy":
        return _toy_bundle(config)
    table = data_mod.load_csv(config.dataset)
    policy = data_mod.infer_policy(table.name)
    train_t, val_t, test_t = data_mod.split(table, policy)

    def windowed(t):
        return WindowedDataset(t, config.lookback, config.horizon)

    return DataBundle(train=windowed(train_t), val=windowed(val_t),
                      test=windowed(test_t), channels=table.n_features)


def _gather(ds, idx) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(ds, ArrayPairs):
        return ds.xs[idx], ds.ys[idx]
    xs, ys = zip(*(ds.pair(int(i)) for i in idx))
    return np.stack(xs), np.stack(ys)


def _masks(dims: ModelDims, options: ModelOptions, config: TrainConfig,
           n_params: int) -> tuple[np.ndarray, np.ndarray | None]:
    slices = param_slices(dims, options)
    train_mask = np.ones(n_params)
    if config.random_transformer:
        for name in ("w_q", "w_k", "w_v", "w_o"):
            train_mask[slices[name]] = 0.0
        if options.sigma_reparam:
            sg = slices["sigma_gammas"]
            train_mask[sg.start:sg.start + 4] = 0.0  # attention scales freeze too
    if not options.revin:
        train_mask[slices["revin_beta"]] = 0.0
        train_mask[slices["revin_gamma"]] = 0.0
    perturb_mask = None
    if not config.sam_perturbs_revin:
        perturb_mask = train_mask.copy()
        perturb_mask[slices["revin_beta"]] = 0.0
        perturb_mask[slices["revin_gamma"]] = 0.0
    return train_mask, perturb_mask


def dataset_training_loss(vec: np.ndarray, ds, dims: ModelDims,
                          options: ModelOptions, batch_size: int = 256) -> float:
    """The 1/(N D) training objective evaluated over a whole split."""
    params = vector_to_params(vec, dims, options)
    n = ds.size
    total = 0.0
    for idx in batches(ds, batch_size):
        xs, ys = _gather(ds, idx)
        out, _ = forward(xs, params, dims, options)
        diff = ys - out
        total += float((diff * diff).sum())
    return total / (n * dims.channels)


def full_loss_grad_closure(ds, dims: ModelDims, options: ModelOptions,
                           batch_size: int = 256):
    """Whole-split loss and gradient as a function of the flat vector."""
    n = ds.size

    def fn(vec):
        params = vector_to_params(vec, dims, options)
        total = 0.0
        grad = None
        for idx in batches(ds, batch_size):
            xs, ys = _gather(ds, idx)
            out, cache = forward(xs, params, dims, options)
            loss, dy = mse_loss_and_grad(out, ys, n, dims.channels)
            g = gradients_to_vector(backward(cache, dy, params, options))
            total += loss
            grad = g if grad is None else grad + g
        return total, grad

    return fn


def evaluate_params(params: ModelParams, ds, dims: ModelDims,
                    options: ModelOptions, batch_size: int = 256) -> tuple[float, float]:
    """Elementwise test metrics (mean over samples x channels x horizon)."""
    sq_sum = 0.0
    abs_sum = 0.0
    count = 0
    for idx in batches(ds, batch_size):
        xs, ys = _gather(ds, idx)
        out, _ = forward(xs, params, dims, options)
        diff = ys - out
        sq_sum += float((diff * diff).sum())
        abs_sum += float(np.abs(diff).sum())
        count += diff.size
    return sq_sum / count, abs_sum / count


@dataclass
class RunReport:
    config: TrainConfig
    epoch_train: list = field(default_factory=list)
    epoch_val: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val_mse: float = float("nan")
    test_mse: float = float("nan")
    test_mae: float = float("nan")
    wall_time_s: float = 0.0
    lambda_max: float | None = None
    lambda_max_converged: bool | None = None
    mean_attention_entropy: float | None = None
    median_attention_nuclear_norm: float | None = None


@dataclass
class TrainOutcome:
    report: RunReport
    params: ModelParams        # best-validation restore, used for test metrics
    final_params: ModelParams  # end of training, used for sharpness readings
    dims: ModelDims
    options: ModelOptions
    bundle: DataBundle
    grad_evals: int = 0


def train(config: TrainConfig) -> TrainOutcome:
    """One full run: shuffled minibatches, SAM or base steps, cosine
    schedule, early stopping, best-validation restore, test metrics."""
    lr_max = resolve_lr(config)
    rho = resolve_rho(config)
    if lr_max <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr_max}")
    if rho < 0:
        raise ConfigError(f"rho must be >= 0, got {rho}")
    if config.horizon < 1 or config.lookback < 1:
        raise ConfigError("horizon and lookback must be >= 1")

    t0 = time.perf_counter()
    bundle = load_bundle(config)
    dims = ModelDims(lookback=config.lookback, horizon=config.horizon,
                     channels=bundle.channels, d_model=config.d_model)
    options = ModelOptions(revin=config.revin, sigma_reparam=config.sigma_reparam,
                           variant=config.attention, revin_eps=config.revin_eps)
    rng = Rng(config.seed)
    vec = params_to_vector(init_params(dims, rng, options))
    train_mask, perturb_mask = _masks(dims, options, config, vec.size)
    state = OptState(config.optimizer, vec.size, weight_decay=config.weight_decay)
    sam_cfg = SamConfig(rho=rho, perturb_mask=perturb_mask)
    es = EarlyStop(patience=config.patience)
    report = RunReport(config=config)
    grad_evals = 0
    best_vec = vec.copy()
    best_val = float("inf")
    best_epoch = 0
    n_train = bundle.train.size
    d = dims.channels

    stop_epoch = config.epochs
    for epoch in range(1, config.epochs + 1):
        lr_epoch = cosine_lr(epoch - 1, config.epochs, lr_max)
        weighted_loss = 0.0
        for idx in batches(bundle.train, config.batch_size, rng, shuffle=True):
            xs, ys = _gather(bundle.train, idx)
            batch_losses = []

            def closure(v):
                nonlocal grad_evals
                grad_evals += 1
                params = vector_to_params(v, dims, options)
                out, cache = forward(xs, params, dims, options)
                loss, dy = mse_loss_and_grad(out, ys, len(idx), d)
                grads = gradients_to_vector(backward(cache, dy, params, options))
                batch_losses.append(loss)
                return loss, grads * train_mask

            if config.sam:
                vec = sam_step(closure, vec, sam_cfg, state, lr_epoch)
            else:
                loss, grads = closure(vec)
                vec = base_step(state, vec, grads, lr_epoch)
            weighted_loss += batch_losses[0] * len(idx)
        report.epoch_train.append(weighted_loss / n_train)

        val_loss = dataset_training_loss(vec, bundle.val, dims, options)
        report.epoch_val.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_vec = vec.copy()
            best_epoch = epoch
        if early_stop_update(es, val_loss):
            stop_epoch = epoch
            break

    params = vector_to_params(best_vec, dims, options)
    test_mse, test_mae = evaluate_params(params, bundle.test, dims, options)
    report.stop_epoch = stop_epoch
    report.best_epoch = best_epoch
    report.best_val_mse = best_val
    report.test_mse = test_mse
    report.test_mae = test_mae
    report.wall_time_s = time.perf_counter() - t0
    return TrainOutcome(report=report, params=params,
                        final_params=vector_to_params(vec, dims, options),
                        dims=dims, options=options, bundle=bundle,
                        grad_evals=grad_evals)


def diagnose(params: ModelParams, dims: ModelDims, options: ModelOptions,
             bundle: DataBundle, sharpness: bool = True,
             attention_stats: bool = True,
             sharpness_iters: int = 100, sharpness_tol: float = 1e-4,
             dump_attention: str | None = None,
             ) -> tuple[SharpnessReport | None, AttentionStats | None]:
    """Sharpness on the training loss plus attention statistics on the
    evaluation split, both at the supplied parameters. ``dump_attention``
    optionally writes every evaluation-split attention matrix to a text file
    for plotting."""
    sharp = None
    stats = None
    if sharpness:
        closure = full_loss_grad_closure(bundle.train, dims, options)
        sharp = lambda_max(closure, params_to_vector(params),
                           max_iters=sharpness_iters, tol=sharpness_tol)
    if attention_stats:
        entropies = []
        norms = []
        dump = open(dump_attention, "w", encoding="utf-8") if dump_attention else None
        try:
            for idx in batches(bundle.test, 256):
                xs, _ = _gather(bundle.test, idx)
                _, cache = forward(xs, params, dims, options)
                for b in range(cache.attn.shape[0]):
                    entropies.append(attention_entropy(cache.attn[b]))
                    norms.append(nuclear_norm(cache.attn[b]))
                    if dump is not None:
                        a = cache.attn[b]
                        dump.write(f"attention {a.shape[0]} {a.shape[1]}\n")
                        for row in a:
                            dump.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        finally:
            if dump is not None:
                dump.close()
        stats = AttentionStats(mean_entropy=float(np.mean(entropies)),
                               nuclear_norms=norms)
    return sharp, stats


TOY_ARMS = ("transformer", "random_transformer", "sigma_reparam", "sam")


def toy_config(scale: str, seed: int, arm: str) -> TrainConfig:
    """Config for one arm of the four-way toy comparison.

    The toy network is the bare attention-plus-linear model (no RevIN), all
    arms share one generated dataset and one initialization stream.
    """
    if scale == "desk":
        # lr calibrated so the reference failure mode shows up at this size:
        # gentler rates let every arm reach the least-squares optimum, while
        # here the plain transformer destabilizes and SAM still converges
        base = TrainConfig(dataset="toy", lookback=64, horizon=16, epochs=100,
                           toy_n_train=2000, toy_n_val=1000, lr=0.2)
    elif scale == "paper":
        base = TrainConfig(dataset="toy", lookback=512, horizon=96, epochs=300,
                           toy_n_train=10_000, toy_n_val=5_000, lr=1e-3)
    else:
        raise ConfigError(f"unknown toy scale {scale!r}")
    # the comparison plots full validation curves, so no early stopping here
    base = replace(base, seed=seed, revin=False, sam=False, rho=0.0,
                   patience=base.epochs + 1)
    if arm == "transformer":
        return base
    if arm == "random_transformer":
        return replace(base, random_transformer=True)
    if arm == "sigma_reparam":
        return replace(base, sigma_reparam=True)
    if arm == "sam":
        return replace(base, sam=True, rho=TOY_RHO)
    raise ConfigError(f"unknown toy arm {arm!r}")


@dataclass
class ToyExperimentResult:
    scale: str
    seeds: list
    oracle_val_mse: float
    outcomes: dict  # arm -> list[TrainOutcome], aligned with seeds

    def final_vals(self, arm: str) -> list:
        return [o.report.epoch_val[-1] for o in self.outcomes[arm]]

    def median_final_val(self, arm: str) -> float:
        return float(np.median(self.final_vals(arm)))


def run_toy_experiment(seeds, scale: str = "desk",
                       arms=TOY_ARMS, progress=None) -> ToyExperimentResult:
    """Train the comparison arms on one shared toy dataset and fit the
    least-squares reference on the same data."""
    seeds = list(seeds)
    outcomes = {arm: [] for arm in arms}
    oracle_val = None
    for seed in seeds:
        for arm in arms:
            config = toy_config(scale, seed, arm)
            outcome = train(config)
            outcomes[arm].append(outcome)
            if progress is not None:
                progress(arm, seed, outcome)
            if oracle_val is None:
                toy = outcome.bundle.toy
                w_opt, _ = oracle_least_squares(toy.train.xs, toy.train.ys)
                n, d = toy.val.xs.shape[0], toy.val.xs.shape[1]
                total = 0.0
                for i in range(n):
                    diff = toy.val.ys[i] - toy.val.xs[i] @ w_opt
                    total += float((diff * diff).sum())
                oracle_val = total / (n * d)
    return ToyExperimentResult(scale=scale, seeds=seeds,
                               oracle_val_mse=oracle_val, outcomes=outcomes)


# ---------------------------------------------------------------------------
# report serialization: line-oriented key/value text, lossless round-trip

REPORT_MAGIC = "samlab-report v1"

_CONFIG_KEYS = [f.name for f in fields(TrainConfig)]
_RESULT_KEYS = ("stop_epoch", "best_epoch", "best_val_mse", "test_mse", "test_mae",
                "lambda_max", "lambda_max_converged", "mean_attention_entropy",
                "median_attention_nuclear_norm", "wall_time_s")
_KNOWN_KEYS = set(_CONFIG_KEYS) | set(_RESULT_KEYS) | {"epoch"}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, AttentionVariant):
        return value.value
    if value is None:
        return "none"
    return str(value)


def write_report(path: str, report: RunReport) -> None:
    lines = [REPORT_MAGIC]
    for key in _CONFIG_KEYS:
        lines.append(f"{key} {_fmt(getattr(report.config, key))}")
    for i, (tr, va) in enumerate(zip(report.epoch_train, report.epoch_val), start=1):
        lines.append(f"epoch {i} train {tr:.17g} val {va:.17g}")
    for key in _RESULT_KEYS:
        value = getattr(report, key)
        if value is None:
            continue  # optional diagnostics left out when not requested
        lines.append(f"{key} {_fmt(value)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


_BOOL_CONFIG = {"revin", "sigma_reparam", "sam", "random_transformer",
                "sam_perturbs_revin"}
_INT_CONFIG = {"lookback", "horizon", "d_model", "batch_size", "epochs",
               "patience", "seed", "toy_channels", "toy_n_train", "toy_n_val",
               "data_seed"}
_FLOAT_CONFIG = {"lr", "rho", "weight_decay", "revin_eps", "toy_noise"}


def _parse_config_value(key: str, raw: str):
    if raw == "none":
        return None
    if key in _BOOL_CONFIG:
        return bool(int(raw))
    if key in _INT_CONFIG:
        return int(raw)
    if key in _FLOAT_CONFIG:
        return float(raw)
    if key == "attention":
        return AttentionVariant(raw)
    return raw


def read_report(path: str) -> RunReport:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != REPORT_MAGIC:
        raise FormatError(f"{path}: not a {REPORT_MAGIC} file")
    config_kwargs = {}
    report = RunReport(config=TrainConfig())
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        key, _, rest = line.partition(" ")
        if key not in _KNOWN_KEYS:
            raise FormatError(f"{path}:{lineno}: unknown field {key!r}")
        if key == "epoch":
            parts = rest.split()
            if len(parts) != 5 or parts[1] != "train" or parts[3] != "val":
                raise FormatError(f"{path}:{lineno}: malformed epoch record")
            report.epoch_train.append(float(parts[2]))
            report.epoch_val.append(float(parts[4]))
        elif key in _CONFIG_KEYS:
            config_kwargs[key] = _parse_config_value(key, rest)
        else:
            if rest == "none":
                setattr(report, key, None)
            elif key == "lambda_max_converged":
                report.lambda_max_converged = bool(int(rest))
            elif key in ("stop_epoch", "best_epoch"):
                setattr(report, key, int(rest))
            else:
                setattr(report, key, float(rest))
    report.config = TrainConfig(**config_kwargs)
    return report


def reports_equal_ignoring_walltime(a: RunReport, b: RunReport) -> bool:
    keys = [k for k in _RESULT_KEYS if k != "wall_time_s"]
    if a.epoch_train != b.epoch_train or a.epoch_val != b.epoch_val:
        return False
    if a.config != b.config:
        return False
    return all(getattr(a, k) == getattr(b, k) for k in keys)
