"""The federated round loop: client releases, aggregation, accounting.

One round works the same for every variant; flags on the variant decide
which pieces are live. Clients clip (or not), release a sketch or a dense
vector (noisy or not), and optionally attach a clipping-impact bit. The
server averages what it got, folds it into momentum and the error
accumulator, extracts the top-k coordinates, applies them to the model,
and lets the threshold controller react to the bits.

Budget bookkeeping happens server-side but tracks the per-client view:
each round costs one sketch release plus, when adaptive, one bit release.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clipping import (
    ClipImpactBit,
    ClippingState,
    aggregate_bits,
    clip,
    clip_impact_bit,
    update_threshold,
)
from .data import ClientPartition, Dataset
from .errors import ConfigurationError
from .hashing import derive_seed
from .metrics import (
    FLOAT_BYTES,
    RoundRecord,
    baseline_bytes_per_round,
    compression_level,
    dense_vector_bytes,
    sketch_message_bytes,
    sparse_update_bytes,
)
from .models import (
    Architecture,
    Batch,
    ModelParams,
    apply_update,
    evaluate_accuracy,
    evaluate_loss,
    init_params,
    loss_and_gradient,
)
from .privacy import (
    NoiseSpec,
    PrivacyAccountant,
    add_gaussian_noise,
    bit_release_rho,
    calibrate_dense_noise,
    calibrate_sketch_noise,
    rho_from_epsilon,
)
from .sketch import CountSketch, SketchConfig

# accumulated float dust tolerated when the last rounds drain the budget
_BUDGET_SLACK = 1e-9


@dataclass(frozen=True)
class Variant:
    """Which mechanisms are live in a run."""

    name: str
    sketched: bool
    clipped: bool
    noisy: bool
    adaptive: bool


VARIANTS = {
    "fedavg": Variant("fedavg", sketched=False, clipped=False, noisy=False, adaptive=False),
    "dpfl": Variant("dpfl", sketched=False, clipped=True, noisy=True, adaptive=False),
    "dpsfl_nonnoise": Variant(
        "dpsfl_nonnoise", sketched=True, clipped=True, noisy=False, adaptive=False
    ),
    "dpsfl": Variant("dpsfl", sketched=True, clipped=True, noisy=True, adaptive=False),
    "dpsfl_ac": Variant("dpsfl_ac", sketched=True, clipped=True, noisy=True, adaptive=True),
}

# the sketch-without-noise pipeline under its usual name
_ALIASES = {"fetchsgd": "dpsfl_nonnoise"}


def resolve_variant(name: str) -> Variant:
    key = _ALIASES.get(name, name)
    if key not in VARIANTS:
        known = sorted(VARIANTS) + sorted(_ALIASES)
        raise ConfigurationError(f"unknown variant {name!r}, expected one of {known}")
    return VARIANTS[key]


@dataclass
class RunConfig:
    """Everything one run needs besides the data itself."""

    variant: str = "dpsfl"
    rounds: int = 100
    total_clients: int = 100
    clients_per_round: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    topk: int = 50_000
    sketch_rows: int = 5
    sketch_cols: int = 500_000
    clip_threshold: float = 1.5
    clip_target_rate: float = 0.9
    clip_impact_bound: float = 0.5
    clip_adjust_rate: float = 0.01
    bit_noise_std: float = 0.1
    epsilon: float | None = 4.0
    delta: float = 1e-5
    bit_accounting: str = "strict"
    model_kind: str = "mlp"
    hidden_dim: int = 64
    baseline_bytes: int | None = None  # per round; default is dense float64 both ways
    run_seed: int = 0
    sketch_seed: int | None = None

    def validate(self) -> Variant:
        variant = resolve_variant(self.variant)
        if self.rounds < 0:
            raise ConfigurationError(f"rounds must be >= 0, got {self.rounds}")
        if self.total_clients < 1:
            raise ConfigurationError(f"total_clients must be >= 1, got {self.total_clients}")
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ConfigurationError(
                f"clients_per_round must be in [1, {self.total_clients}], "
                f"got {self.clients_per_round}"
            )
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epsilon is not None and not (self.epsilon > 0):
            raise ConfigurationError(f"epsilon must be positive or None, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"delta must be in (0, 1), got {self.delta}")
        if self.bit_accounting not in ("strict", "reported"):
            raise ConfigurationError(
                f"bit_accounting must be 'strict' or 'reported', got {self.bit_accounting!r}"
            )
        if self.baseline_bytes is not None and self.baseline_bytes <= 0:
            raise ConfigurationError(f"baseline_bytes must be positive, got {self.baseline_bytes}")
        return variant

    @property
    def private(self) -> bool:
        return self.epsilon is not None and math.isfinite(self.epsilon)


@dataclass
class ClientMessage:
    """What one client sends up in one round."""

    sketch: CountSketch | None = None
    dense: np.ndarray | None = None
    bit: ClipImpactBit | None = None


@dataclass
class ServerState:
    config: RunConfig
    variant: Variant
    arch: Architecture
    model: ModelParams
    clipping: ClippingState
    accountant: PrivacyAccountant | None
    sketch_config: SketchConfig | None
    momentum_sketch: CountSketch | None
    error_sketch: CountSketch | None
    momentum_dense: np.ndarray | None
    round_index: int = 0
    last_extracted: np.ndarray | None = None
    last_mean_bit: float | None = None
    bytes_up: int = 0
    bytes_down: int = 0
    stop_reason: str | None = None

    @property
    def dim(self) -> int:
        return self.arch.param_count


def sample_clients(total_clients: int, count: int, seed: int) -> np.ndarray:
    """Uniform draw of `count` distinct client ids, ascending."""
    if not 1 <= count <= total_clients:
        raise ConfigurationError(
            f"cannot draw {count} distinct clients from {total_clients}"
        )
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(total_clients, size=count, replace=False))


def _build_arch(config: RunConfig, dataset: Dataset) -> Architecture:
    if dataset.num_classes == 0:
        if config.model_kind != "linear":
            raise ConfigurationError(
                f"regression data requires the linear model, got {config.model_kind!r}"
            )
        return Architecture("linear", dataset.input_dim, 1)
    if config.model_kind == "linear":
        raise ConfigurationError("the linear model cannot train on classification data")
    hidden = config.hidden_dim if config.model_kind == "mlp" else 0
    return Architecture(config.model_kind, dataset.input_dim, dataset.num_classes, hidden)


def init_run(config: RunConfig, dataset: Dataset) -> ServerState:
    """Fresh server state: model, accumulators, accountant, controller."""
    variant = config.validate()
    arch = _build_arch(config, dataset)
    dim = arch.param_count

    sketch_config = None
    momentum_sketch = None
    error_sketch = None
    momentum_dense = None
    if variant.sketched:
        if not 1 <= config.topk <= dim:
            raise ConfigurationError(f"topk must be in [1, {dim}], got {config.topk}")
        seed = config.sketch_seed
        if seed is None:
            seed = derive_seed(config.run_seed, "sketch")
        sketch_config = SketchConfig(
            rows=config.sketch_rows, cols=config.sketch_cols, dim=dim, master_seed=seed
        )
        momentum_sketch = CountSketch.zeros(sketch_config)
        error_sketch = CountSketch.zeros(sketch_config)
    else:
        momentum_dense = np.zeros(dim)

    accountant = None
    if variant.noisy and config.private:
        rho_total = rho_from_epsilon(config.epsilon, config.delta)
        bit_rho = 0.0
        if variant.adaptive and config.bit_accounting == "strict":
            bit_rho = bit_release_rho(config.bit_noise_std)
        bit_rounds = max(0, config.rounds - 1)  # round 0 has nothing to report on
        noise_budget = rho_total - bit_rho * bit_rounds
        if config.rounds > 0 and noise_budget <= 0:
            raise ConfigurationError(
                f"bit releases alone cost {bit_rho * bit_rounds:.4g} of a "
                f"{rho_total:.4g} budget; raise epsilon, bit_noise_std, or use "
                f"bit_accounting='reported'"
            )
        per_round = noise_budget / config.rounds if config.rounds else 0.0
        accountant = PrivacyAccountant(
            rho_total=rho_total, per_round_rho=per_round, bit_rho_per_round=bit_rho
        )

    clipping = ClippingState(
        threshold=config.clip_threshold,
        target_rate=config.clip_target_rate,
        impact_bound=config.clip_impact_bound,
        adjust_rate=config.clip_adjust_rate,
        bit_noise_std=config.bit_noise_std,
    )

    return ServerState(
        config=config,
        variant=variant,
        arch=arch,
        model=init_params(arch, derive_seed(config.run_seed, "init")),
        clipping=clipping,
        accountant=accountant,
        sketch_config=sketch_config,
        momentum_sketch=momentum_sketch,
        error_sketch=error_sketch,
        momentum_dense=momentum_dense,
    )


def client_step(
    variant: Variant,
    model: ModelParams,
    batch: Batch,
    clipping: ClippingState,
    noise_spec: NoiseSpec,
    watch_indices: np.ndarray | None,
    sketch_config: SketchConfig | None,
    seed: int,
) -> ClientMessage:
    """One client's local computation and release for one round."""
    _, grad = loss_and_gradient(model, batch)

    bit = None
    if variant.adaptive and watch_indices is not None and len(watch_indices):
        bit = clip_impact_bit(
            grad,
            clipping.threshold,
            watch_indices,
            clipping.impact_bound,
            clipping.bit_noise_std,
            derive_seed(seed, "bit"),
        )

    released = clip(grad, clipping.threshold) if variant.clipped else grad

    if variant.sketched:
        sketch = CountSketch.from_vector(sketch_config, released)
        if variant.noisy:
            sketch = add_gaussian_noise(sketch, noise_spec, derive_seed(seed, "noise"))
        return ClientMessage(sketch=sketch, bit=bit)

    if variant.noisy and noise_spec.sigma > 0:
        rng = np.random.default_rng(derive_seed(seed, "noise"))
        released = released + rng.normal(0.0, noise_spec.sigma, size=len(released))
    return ClientMessage(dense=released, bit=bit)


def server_round(state: ServerState, messages: list[ClientMessage]) -> ServerState:
    """Aggregate one round of messages into the model and the controller."""
    config = state.config
    n = len(messages)
    if n != config.clients_per_round:
        raise ConfigurationError(f"expected {config.clients_per_round} messages, got {n}")

    if state.variant.sketched:
        total = np.zeros_like(state.error_sketch.counters)
        for msg in messages:
            if msg.sketch is None:
                raise ConfigurationError("sketched variant received a dense message")
            if msg.sketch.config != state.sketch_config:
                raise ConfigurationError("client sketch does not match the run's sketch config")
            total += msg.sketch.counters
        average = CountSketch(state.sketch_config, total / n)

        state.momentum_sketch = state.momentum_sketch.scale(config.momentum).merge(average)
        state.error_sketch = state.error_sketch.merge(
            state.momentum_sketch.scale(config.learning_rate)
        )
        extracted = state.error_sketch.unsketch_topk(config.topk)
        state.error_sketch = state.error_sketch - CountSketch.from_sparse(
            state.sketch_config, extracted.indices, extracted.values
        )
        state.model = apply_update(state.model, extracted.indices, extracted.values)
        state.last_extracted = extracted.indices
    else:
        total = np.zeros(state.dim)
        for msg in messages:
            if msg.dense is None:
                raise ConfigurationError("dense variant received a sketch message")
            total += msg.dense
        state.momentum_dense = config.momentum * state.momentum_dense + total / n
        step = config.learning_rate * state.momentum_dense
        state.model = ModelParams(state.arch, state.model.values - step)

    state.last_mean_bit = None
    if state.variant.adaptive:
        bits = [m.bit for m in messages if m.bit is not None]
        if bits:
            mean_bit = aggregate_bits(bits, n)
            state.clipping = update_threshold(state.clipping, mean_bit)
            state.last_mean_bit = mean_bit

    state.round_index += 1
    return state


def _charge_round(state: ServerState) -> tuple[bool, float | None]:
    """Reserve this round's budget.

    Returns (True, rho available for noise) on success, with rho None for
    non-private runs; (False, None) when the budget cannot cover another
    round and the run should stop.
    """
    acct = state.accountant
    if acct is None:
        return True, None
    bit_cost = acct.bit_rho_per_round if state.round_index >= 1 else 0.0
    noise_cost = acct.per_round_rho
    want = bit_cost + noise_cost
    remaining = acct.remaining
    if want > remaining:
        # repeated summation leaves dust; let the last round absorb it
        if want > remaining * (1 + _BUDGET_SLACK) + 1e-18:
            return False, None
        noise_cost = remaining - bit_cost
        if noise_cost <= 0:
            return False, None
    acct.spend(bit_cost + noise_cost)
    return True, noise_cost


def _round_noise(state: ServerState, rho: float | None) -> NoiseSpec:
    if not state.variant.noisy or rho is None:
        return NoiseSpec.zero()
    if state.variant.sketched:
        return calibrate_sketch_noise(state.clipping.threshold, state.config.sketch_rows, rho)
    return calibrate_dense_noise(state.clipping.threshold, rho)


def _client_batch(
    dataset: Dataset, part: ClientPartition, client: int, round_index: int, config: RunConfig
) -> Batch:
    indices = part.client_indices[client]
    if config.batch_size < len(indices):
        rng = np.random.default_rng(
            derive_seed(config.run_seed, "batch", round_index, int(client))
        )
        indices = rng.choice(indices, size=config.batch_size, replace=False)
    return Batch(dataset.features[indices], dataset.labels[indices])


def run_round(state: ServerState, dataset: Dataset, part: ClientPartition) -> bool:
    """One full round against the given data. False means the budget could
    not cover the round and the run should stop."""
    t = state.round_index
    charged, rho = _charge_round(state)
    if not charged:
        state.stop_reason = f"budget exhausted before round {t}"
        return False
    noise_spec = _round_noise(state, rho)

    selected = sample_clients(
        state.config.total_clients,
        state.config.clients_per_round,
        derive_seed(state.config.run_seed, "sample", t),
    )
    messages = []
    for client in selected:
        batch = _client_batch(dataset, part, int(client), t, state.config)
        messages.append(
            client_step(
                state.variant,
                state.model,
                batch,
                state.clipping,
                noise_spec,
                state.last_extracted,
                state.sketch_config,
                derive_seed(state.config.run_seed, "client", t, int(client)),
            )
        )

    bits_sent = sum(1 for m in messages if m.bit is not None)
    server_round(state, messages)

    n = state.config.clients_per_round
    if state.variant.sketched:
        state.bytes_up += n * sketch_message_bytes(
            state.config.sketch_rows, state.config.sketch_cols
        )
        state.bytes_up += bits_sent * FLOAT_BYTES
        state.bytes_down += n * sparse_update_bytes(state.config.topk)
    else:
        state.bytes_up += n * dense_vector_bytes(state.dim)
        state.bytes_down += n * dense_vector_bytes(state.dim)
    return True


def _evaluate(state: ServerState, batch: Batch) -> tuple[float, float]:
    loss = evaluate_loss(state.model, batch)
    if state.arch.kind == "linear":
        return loss, math.nan
    return loss, evaluate_accuracy(state.model, batch)


def _record(state: ServerState, loss: float, accuracy: float, used_threshold: float) -> RoundRecord:
    config = state.config
    if state.accountant is not None:
        rho_spent = state.accountant.rho_spent
        epsilon = state.accountant.epsilon_spent(config.delta)
    else:
        rho_spent = 0.0
        epsilon = math.inf
    baseline = config.baseline_bytes
    if baseline is None:
        baseline = baseline_bytes_per_round(state.dim, config.clients_per_round)
    return RoundRecord(
        round_index=state.round_index - 1,
        loss=loss,
        accuracy=accuracy,
        clip_threshold=used_threshold,
        mean_bit=state.last_mean_bit,
        rho_spent=rho_spent,
        epsilon_spent=epsilon,
        bytes_up=state.bytes_up,
        bytes_down=state.bytes_down,
        compression_level=compression_level(
            baseline * state.round_index, state.bytes_up + state.bytes_down
        ),
    )


def run(
    config: RunConfig,
    dataset: Dataset,
    part: ClientPartition,
    eval_dataset: Dataset | None = None,
    return_state: bool = False,
):
    """Full training run; one RoundRecord per completed round.

    Stops quietly when the accountant cannot cover another round; the stop
    reason lands on the returned state and in the record file footer.
    """
    config.validate()
    if part.num_clients != config.total_clients:
        raise ConfigurationError(
            f"partition has {part.num_clients} clients, config says {config.total_clients}"
        )
    state = init_run(config, dataset)
    eval_source = eval_dataset if eval_dataset is not None else dataset
    eval_batch = Batch(eval_source.features, eval_source.labels)

    records = []
    for _ in range(config.rounds):
        used_threshold = state.clipping.threshold
        if not run_round(state, dataset, part):
            break
        loss, accuracy = _evaluate(state, eval_batch)
        records.append(_record(state, loss, accuracy, used_threshold))
    if return_state:
        return records, state
    return records
