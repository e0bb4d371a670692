"""Training: losses, momentum optimizer, the two-phase adversarial epoch,
variant configuration, checkpoints, and evaluation of trained parameters.

Epoch structure with the discriminator enabled: Phase 1 walks the
mini-batches and, per batch, takes one minimization step of the
adversarial objective on the encoder parameters followed by one
maximization step on the discriminator and the task-specific dense
parameters; Phase 2 walks the mini-batches minimizing the task loss for
every trainable parameter except the discriminator's. Without the
discriminator only Phase 2 runs.

All randomness is drawn from named streams ("init", "shuffle",
"dropout", "adv-sample", "split") derived from the one config seed, so
identical configs replay bit-identically.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import encoder, heads, interaction, rngs

__all__ = [
    "ModelConfig",
    "VARIANTS",
    "TrainResult",
    "apply_lr_decay",
    "param_specs",
    "init_params",
    "as_leaves",
    "fingerprint",
    "group_names",
    "momentum_step",
    "task_loss",
    "adv_loss",
    "forward_task",
    "forward_discriminator",
    "forward_adv",
    "discriminator_accuracy",
    "train",
    "train_epoch",
    "predict",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "gradient_check",
]

CHECKPOINT_FORMAT = "stman-checkpoint-v1"


@dataclass
class ModelConfig:
    """Hyperparameters and variant flags. Defaults are the full model's
    published settings; all four flags on selects the complete system."""

    K: int = 100
    Z: int = 100
    H: int = 50
    D: int = 100
    E: int = 50
    dropout: float = 0.2
    lr: float = 0.1
    lr_decay: float = 0.8
    momentum_mu: float = 0.9
    batch: int = 32
    epochs: int = 30
    seed: int = 0
    use_td: bool = True
    use_st: bool = True
    use_mask: bool = True
    use_aux: bool = True
    min_count: int = 1
    # which parameters the maximization half of Phase 1 updates besides
    # the discriminator: the task-specific dense layers, or the decoders
    adv_theta_k: str = "dense"
    # run Phase 1 every epoch, or only on the first
    adv_phase1: str = "every"
    # fraction of training dialogues participating in Phase 1; 0 skips it
    adv_fraction: float = 1.0

    def validate(self) -> None:
        for name in ("K", "Z", "H", "D", "E", "batch", "epochs", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0.0 <= self.momentum_mu < 1.0:
            raise ValueError(f"momentum_mu must be in [0, 1), got {self.momentum_mu}")
        if self.adv_theta_k not in ("dense", "heads"):
            raise ValueError(f"adv_theta_k must be 'dense' or 'heads', got {self.adv_theta_k!r}")
        if self.adv_phase1 not in ("every", "first"):
            raise ValueError(f"adv_phase1 must be 'every' or 'first', got {self.adv_phase1!r}")
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ValueError(f"adv_fraction must be in [0, 1], got {self.adv_fraction}")


# Ablation variants: which flags each named configuration flips.
VARIANTS = {
    "basic": dict(use_td=False, use_st=False, use_mask=True, use_aux=True),
    "basic-mask": dict(use_td=False, use_st=False, use_mask=False, use_aux=True),
    "basic-aux": dict(use_td=False, use_st=False, use_mask=True, use_aux=False),
    "basic+td": dict(use_td=True, use_st=False, use_mask=True, use_aux=True),
    "basic+st": dict(use_td=False, use_st=True, use_mask=True, use_aux=True),
    "stman": dict(use_td=True, use_st=True, use_mask=True, use_aux=True),
}


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return replace(base, **VARIANTS[name])


def apply_lr_decay(lr0: float, lr_decay: float, epoch_index: int) -> float:
    if epoch_index < 0:
        raise ValueError(f"epoch_index must be >= 0, got {epoch_index}")
    return lr0 * lr_decay**epoch_index


# -------------------------------------------------------------- parameters


def param_specs(cfg: ModelConfig, vocab_size: int) -> list[tuple[str, tuple[int, int]]]:
    return (encoder.param_specs(vocab_size, cfg.D, cfg.E)
            + interaction.param_specs(cfg.E, cfg.K, cfg.Z, cfg.use_st,
                                      cfg.use_aux, cfg.use_td)
            + heads.param_specs(cfg.K, cfg.H, cfg.use_aux, cfg.use_td))


def init_params(cfg: ModelConfig, vocab_size: int) -> dict[str, np.ndarray]:
    """Deterministic uniform init from the "init" stream, drawn in
    allocation order so a (config, seed) pair always produces the same
    weights.

    Bias rows start in U(-0.01, 0.01); weight matrices use the fan-scaled
    range U(-l, l) with l = sqrt(6 / (rows + cols)). A flat tiny range for
    the matrices leaves every dialogue mapped to nearly identical features,
    and once the output biases absorb the class priors the remaining
    gradients are proportional to that vanishing feature variance, so
    training stalls on the prior plateau; fan-scaled matrices keep early
    forward signals at unit order and avoid the trap."""
    rng = rngs.stream(cfg.seed, "init")
    out = {}
    for name, shape in param_specs(cfg, vocab_size):
        rows, cols = shape
        limit = 0.01 if rows == 1 else np.sqrt(6.0 / (rows + cols))
        out[name] = rng.uniform(-limit, limit, size=shape)
    return out


def as_leaves(params: dict[str, np.ndarray]) -> dict[str, ad.Node]:
    """Fresh leaf nodes sharing the parameter arrays (one set per forward)."""
    return {name: ad.leaf(arr) for name, arr in params.items()}


def fingerprint(params: dict[str, np.ndarray], prefixes=("",)) -> str:
    """Order-independent content hash of every parameter matching any of
    the prefixes; used to assert what an update phase did not touch."""
    h = hashlib.sha256()
    for name in sorted(params):
        if any(name.startswith(p) for p in prefixes):
            h.update(name.encode())
            h.update(params[name].tobytes())
    return h.hexdigest()


def group_names(params: dict, cfg: ModelConfig, group: str) -> list[str]:
    """Parameter-name selectors for the update phases."""
    names = sorted(params)
    if group == "enc":
        return [n for n in names if n.startswith("enc.")]
    if group == "td":
        return [n for n in names if n.startswith("td.")]
    if group == "theta_k":
        if cfg.adv_theta_k == "dense":
            return [n for n in names if n.startswith("proj.")]
        return [n for n in names if n.startswith(("use.", "sa."))]
    if group == "task":
        return [n for n in names if not n.startswith("td.")]
    raise ValueError(f"unknown parameter group {group!r}")


def momentum_step(params: dict, velocities: dict, grads: dict, lr: float,
                  mu: float, names) -> None:
    """v <- mu v - lr g; theta <- theta + v, applied in place. Parameters
    whose gradient is absent (objective does not reach them) are left
    untouched, velocity included."""
    for name in names:
        g = grads.get(name)
        if g is None:
            continue
        v = velocities[name]
        v *= mu
        v -= lr * g
        params[name] += v


# ------------------------------------------------------------------ losses


def _last_valid_onehot(utt_valid: np.ndarray) -> np.ndarray:
    B, L = utt_valid.shape
    onehot = np.zeros((B, L))
    last = utt_valid.sum(axis=1) - 1
    onehot[np.arange(B), last] = 1.0
    return onehot


def task_loss(p_m: ad.Node, sat: np.ndarray, sa_probs, sent: np.ndarray,
              utt_valid: np.ndarray, use_aux: bool) -> ad.Node:
    """Batch-mean task loss.

    Per dialogue: cross-entropy of the satisfaction prediction, plus the
    per-utterance sentiment cross-entropies averaged over that dialogue's
    real utterances. Padded rows carry weight zero by construction.
    """
    B = sat.shape[0]
    g_m = np.zeros((B, heads.N_SAT))
    g_m[np.arange(B), sat] = 1.0 / B
    loss = ad.scale(ad.sum_all(ad.hadamard(ad.constant(g_m), ad.log_clamped(p_m))), -1.0)
    if not use_aux:
        return loss
    lengths = utt_valid.sum(axis=1)
    for t, p_t in enumerate(sa_probs):
        w = np.where(utt_valid[:, t], 1.0 / (lengths * B), 0.0)
        g_t = np.zeros((B, heads.N_SENT))
        g_t[np.arange(B), sent[:, t]] = w
        term = ad.scale(ad.sum_all(ad.hadamard(ad.constant(g_t),
                                               ad.log_clamped(p_t))), -1.0)
        loss = ad.add(loss, term)
    return loss


def adv_loss(pk_m, pk_a, utt_valid: np.ndarray) -> ad.Node:
    """Discriminator log-likelihood J: per dialogue, mean log-probability
    of the true origin over the 2L feature rows (L from each stream),
    then batch-mean. Maximization ascends it, minimization descends it."""
    B, _ = utt_valid.shape
    lengths = utt_valid.sum(axis=1)
    loss = None
    for cls, stream in ((0, pk_m), (1, pk_a)):
        for t, p_t in enumerate(stream):
            w = np.where(utt_valid[:, t], 1.0 / (2.0 * lengths * B), 0.0)
            g_t = np.zeros((B, heads.N_TASKS))
            g_t[:, cls] = w
            term = ad.sum_all(ad.hadamard(ad.constant(g_t), ad.log_clamped(p_t)))
            loss = term if loss is None else ad.add(loss, term)
    return loss


# ---------------------------------------------------------------- forwards


def forward_task(P: dict, batch: cp.Batch, cfg: ModelConfig,
                 train_mode: bool = False, drop_rng=None):
    """Full task forward on one batch. Returns (loss, p_m, sa_probs);
    sa_probs is None without the auxiliary head."""
    B, L, _ = batch.ids.shape
    rate = cfg.dropout if train_mode else 0.0
    V = encoder.encode_grid(P, batch.ids, batch.tok_valid, cfg.E, rate, drop_rng)
    _, _, H_m, H_a = interaction.run_interaction(
        P, V, batch.turn, B, L, cfg.K, cfg.use_st, cfg.use_aux, use_td=False)
    keep = (batch.is_user & batch.utt_valid) if cfg.use_mask else batch.utt_valid
    p_m, _ = heads.use_decode_steps(P, H_m, keep, _last_valid_onehot(batch.utt_valid))
    sa_probs = heads.sa_decode(P, H_a) if cfg.use_aux else None
    loss = task_loss(p_m, batch.sat, sa_probs, batch.sent, batch.utt_valid,
                     cfg.use_aux)
    return loss, p_m, sa_probs


def forward_discriminator(P: dict, batch: cp.Batch, cfg: ModelConfig,
                          train_mode: bool = False, drop_rng=None):
    """Encoder, both dense projections, and the discriminator over each
    stream. Returns (pk_m, pk_a): per-step (B, 2) origin distributions."""
    B, L, _ = batch.ids.shape
    rate = cfg.dropout if train_mode else 0.0
    V = encoder.encode_grid(P, batch.ids, batch.tok_valid, cfg.E, rate, drop_rng)
    X_m = interaction.project(P, V, "m")
    X_a = interaction.project(P, V, "a")
    pk_m = heads.discriminate_steps(P, X_m, B, L, cfg.K)
    pk_a = heads.discriminate_steps(P, X_a, B, L, cfg.K)
    return pk_m, pk_a


def forward_adv(P: dict, batch: cp.Batch, cfg: ModelConfig,
                train_mode: bool = False, drop_rng=None) -> ad.Node:
    """Adversarial objective J on one batch."""
    pk_m, pk_a = forward_discriminator(P, batch, cfg, train_mode, drop_rng)
    return adv_loss(pk_m, pk_a, batch.utt_valid)


def discriminator_accuracy(params: dict, dialogues: list, vocab: cp.Vocabulary,
                           cfg: ModelConfig) -> float:
    """Per-utterance accuracy of the discriminator at naming each feature
    row's stream of origin, over both streams' real utterances."""
    correct = 0
    total = 0
    for batch in cp.batchify(dialogues, vocab, cfg.batch):
        pk_m, pk_a = forward_discriminator(as_leaves(params), batch, cfg)
        for cls, stream in ((0, pk_m), (1, pk_a)):
            for t, p_t in enumerate(stream):
                preds = np.argmax(p_t.value, axis=1)
                valid = batch.utt_valid[:, t]
                correct += int(np.sum((preds == cls) & valid))
                total += int(np.sum(valid))
    return correct / total


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    config: ModelConfig
    vocab: cp.Vocabulary
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1


def _grads_of(params: dict, build):
    """One forward/backward pass; returns (name -> gradient, loss value).
    The gradient is None where the objective never touched the parameter."""
    P = as_leaves(params)
    with ad.Tape() as tape:
        loss = build(P)
        tape.backward(loss)
    return {name: P[name].grad for name in params}, float(loss.value[0, 0])


def train_epoch(params: dict, velocities: dict, train_dialogues: list,
                adv_ids: set, vocab: cp.Vocabulary, cfg: ModelConfig,
                epoch: int, shuffle_rng, drop_rng) -> dict:
    """One epoch in place; returns the epoch's loss summary."""
    lr = apply_lr_decay(cfg.lr, cfg.lr_decay, epoch)
    perm = shuffle_rng.permutation(len(train_dialogues))
    ordered = [train_dialogues[i] for i in perm]
    batches = cp.batchify(ordered, vocab, cfg.batch)

    adv_value = None
    run_phase1 = (cfg.use_td and cfg.adv_fraction > 0.0
                  and (cfg.adv_phase1 == "every" or epoch == 0))
    if run_phase1:
        adv_dialogues = [d for d in ordered if d.id in adv_ids]
        total = 0.0
        seen = 0
        for batch in cp.batchify(adv_dialogues, vocab, cfg.batch):
            grads, _ = _grads_of(params, lambda P: forward_adv(
                P, batch, cfg, train_mode=True, drop_rng=drop_rng))
            momentum_step(params, velocities, grads, lr, cfg.momentum_mu,
                          group_names(params, cfg, "enc"))
            grads, value = _grads_of(params, lambda P: forward_adv(
                P, batch, cfg, train_mode=True, drop_rng=drop_rng))
            ascent = {n: None if g is None else -g for n, g in grads.items()}
            momentum_step(params, velocities, ascent, lr, cfg.momentum_mu,
                          group_names(params, cfg, "td")
                          + group_names(params, cfg, "theta_k"))
            total += value * batch.size
            seen += batch.size
        adv_value = total / seen if seen else None

    total = 0.0
    for batch in batches:
        grads, value = _grads_of(params, lambda P: forward_task(
            P, batch, cfg, train_mode=True, drop_rng=drop_rng)[0])
        momentum_step(params, velocities, grads, lr, cfg.momentum_mu,
                      group_names(params, cfg, "task"))
        total += value * batch.size
    return {"epoch": epoch, "lr": lr,
            "task_loss": total / len(train_dialogues),
            "adv_value": adv_value}


def train(split: cp.CorpusSplit, cfg: ModelConfig) -> TrainResult:
    """Full run: init, epochs, per-epoch dev scoring, best-checkpoint
    selection by dev satisfaction Macro F1."""
    cfg.validate()
    if not split.train:
        raise ValueError("empty training split")
    vocab = cp.build_vocab(split.train, cfg.min_count)
    params = init_params(cfg, len(vocab))
    velocities = {name: np.zeros_like(arr) for name, arr in params.items()}
    shuffle_rng = rngs.stream(cfg.seed, "shuffle")
    drop_rng = rngs.stream(cfg.seed, "dropout")

    adv_ids: set = set()
    if cfg.use_td and cfg.adv_fraction > 0.0:
        n_adv = int(np.floor(cfg.adv_fraction * len(split.train)))
        pick = rngs.stream(cfg.seed, "adv-sample").permutation(len(split.train))[:n_adv]
        adv_ids = {split.train[i].id for i in pick}

    result = TrainResult(params=params, config=cfg, vocab=vocab)
    best_f1 = -1.0
    best_params = None
    for epoch in range(cfg.epochs):
        summary = train_epoch(params, velocities, split.train, adv_ids, vocab,
                              cfg, epoch, shuffle_rng, drop_rng)
        if split.dev:
            dev = evaluate(params, split.dev, vocab, cfg)
            summary["dev_use_acc"] = dev["use"]["accuracy"]
            summary["dev_use_macro_f1"] = dev["use"]["macro_f1"]
            if cfg.use_aux:
                summary["dev_sa_acc"] = dev["sa"]["accuracy"]
                summary["dev_sa_macro_f1"] = dev["sa"]["macro_f1"]
            if dev["use"]["macro_f1"] > best_f1:
                best_f1 = dev["use"]["macro_f1"]
                best_params = copy.deepcopy(params)
                result.best_epoch = epoch
        result.history.append(summary)
    if best_params is not None:
        result.params = best_params
    return result


# --------------------------------------------------------------- inference


def predict(params: dict, dialogues: list, vocab: cp.Vocabulary,
            cfg: ModelConfig, batch_size: int | None = None):
    """Argmax predictions in evaluation mode (no dropout). Returns
    (use_preds, sa_preds) with sa_preds flattened over real utterances in
    corpus order, or None without the auxiliary head. Ties break toward
    the lowest class index."""
    use_preds: list[int] = []
    sa_preds: list[int] | None = [] if cfg.use_aux else None
    for batch in cp.batchify(dialogues, vocab, batch_size or cfg.batch):
        P = as_leaves(params)
        _, p_m, sa_probs = forward_task(P, batch, cfg, train_mode=False)
        use_preds.extend(int(i) for i in np.argmax(p_m.value, axis=1))
        if cfg.use_aux:
            stacked = np.stack([p.value for p in sa_probs])  # (L, B, 3)
            for b in range(batch.size):
                for t in range(batch.ids.shape[1]):
                    if batch.utt_valid[b, t]:
                        sa_preds.append(int(np.argmax(stacked[t, b])))
    return use_preds, sa_preds


def evaluate(params: dict, dialogues: list, vocab: cp.Vocabulary,
             cfg: ModelConfig) -> dict:
    """Metrics report for both tasks on a dialogue list."""
    # deferred import: evalcli imports this module for its CLI surface
    from .evalcli import score_labels

    use_preds, sa_preds = predict(params, dialogues, vocab, cfg)
    use_truth = [cp.SATISFACTIONS.index(d.satisfaction) for d in dialogues]
    report = {"use": score_labels(use_preds, use_truth, len(cp.SATISFACTIONS))}
    if cfg.use_aux:
        sa_truth = [cp.SENTIMENTS.index(u.sentiment)
                    for d in dialogues for u in d.utterances]
        report["sa"] = score_labels(sa_preds, sa_truth, len(cp.SENTIMENTS))
    return report


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict, cfg: ModelConfig, vocab_size: int) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(cfg),
        "vocab_size": vocab_size,
        "params": {
            name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
            for name, arr in params.items()
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    """Returns (params, config, vocab_size); every shape is validated
    against what the config says the model must contain."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in payload["config"].items() if k in known})
    cfg.validate()
    vocab_size = payload["vocab_size"]
    expected = dict(param_specs(cfg, vocab_size))
    got = payload["params"]
    if set(got) != set(expected):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise ValueError(f"checkpoint parameter mismatch: missing {missing}, extra {extra}")
    params = {}
    for name, spec in expected.items():
        entry = got[name]
        if tuple(entry["shape"]) != spec:
            raise ValueError(f"{name}: shape {entry['shape']} != expected {list(spec)}")
        arr = np.array(entry["values"], dtype=np.float64).reshape(spec)
        params[name] = arr
    return params, cfg, vocab_size


# --------------------------------------------------------------- grad check


def gradient_check(cfg: ModelConfig, dialogues: list, vocab: cp.Vocabulary,
                   h: float = 1e-5) -> dict[str, float]:
    """Central-difference check of every parameter gradient for both the
    task loss and the adversarial objective, in evaluation mode (dropout
    off so the losses are deterministic functions of the parameters).
    Returns the worst relative error per parameter name."""
    (batch,) = cp.batchify(dialogues, vocab, max(len(dialogues), 1))
    params = init_params(cfg, len(vocab))

    builders = [lambda P: forward_task(P, batch, cfg)[0]]
    if cfg.use_td:
        builders.append(lambda P: forward_adv(P, batch, cfg))

    worst: dict[str, float] = {name: 0.0 for name in params}
    for build in builders:
        grads, _ = _grads_of(params, build)
        for name, arr in params.items():
            if grads[name] is None:
                continue
            analytic = grads[name]
            flat = arr.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(build(as_leaves(params)).value[0, 0])
                flat[i] = orig - h
                down = float(build(as_leaves(params)).value[0, 0])
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * h)
            numeric = numeric.reshape(arr.shape)
            denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-4)
            err = float(np.max(np.abs(analytic - numeric) / denom))
            worst[name] = max(worst[name], err)
    return worst
