"""Four-step hardware-guided synthesis flow.

Order: seed -> weight growth (wg) -> row/column pruning (rcp) -> row/column
growth back to the nearest latency hysteresis point (rcg) -> weight pruning
(wp). CPU mode skips rcp and rcg to maximize weight sparsity. Each step
appends a report row (dims, parameter counts, validation perplexity,
measured forward latency); prune phases restore the last passing checkpoint
so the flow never emits a model violating the accuracy threshold.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import growprune, latlab
from .corpus import Corpus, batch_windows, bundled_corpus_path, load_corpus
from .growprune import GrowPruneConfig, HalveDecision
from .hlstm import LMModel, bptt, evaluate, perplexity, unroll_forward
from .numkit import ContractViolation, MaskedLinear, make_rng, sgd_step, sgd_update

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1

PHASES = ("wg", "rcp", "rcg", "wp", "done")


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1.0
    lr_decay: float = 0.1
    lr_patience: int = 4          # epochs without validation improvement
    weight_decay: float = 1.2e-6
    dropout_h: float = 0.0


@dataclass
class LatencyConfig:
    mode: str = "virtual"         # "virtual" (synthetic clock) or "real"
    curve: latlab.SyntheticCurveSpec = field(default_factory=latlab.SyntheticCurveSpec)
    measure_batch: int = 16
    measure_seq: int = 64
    runs: int = 9


@dataclass
class FlowConfig:
    corpus_path: str = "bundled"
    train_frac: float = 0.8
    valid_frac: float = 0.1
    d_x: int = 32
    d_s: int = 128
    d_h: int = 128
    depth: int = 1
    seed_sparsity: float = 0.5
    growprune: GrowPruneConfig = field(default_factory=GrowPruneConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    baseline_epochs: int = 2
    wg_epochs: int = 4
    growth_epochs: int = 3        # weight growth applied after these epochs
    rcg_epochs: int = 2
    batch: int = 32
    seq_len: int = 64
    cpu_mode: bool = False
    profile_path: str | None = None   # pre-measured CSV; else sweep
    profile_grid: tuple[int, int, int] = (1, 128, 1)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    seed: int = 0
    max_prune_iters: int = 40

    def __post_init__(self):
        if not 0.0 < self.seed_sparsity < 1.0:
            raise ConfigError("seed_sparsity must be in (0, 1)")
        if self.d_s != self.d_h:
            raise ConfigError("the flow ties d_s and d_h; set them equal")
        for name in ("baseline_epochs", "wg_epochs", "growth_epochs", "rcg_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @classmethod
    def from_json(cls, path: str | Path) -> "FlowConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read flow config {path}: {exc}") from exc
        if data.pop("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version in {path}")
        try:
            gp = GrowPruneConfig(**data.pop("growprune", {}))
            opt = OptimizerConfig(**data.pop("optimizer", {}))
            lat_raw = data.pop("latency", {})
            curve = latlab.SyntheticCurveSpec(**lat_raw.pop("curve", {}))
            lat = LatencyConfig(curve=curve, **lat_raw)
            if "profile_grid" in data:
                data["profile_grid"] = tuple(data["profile_grid"])
            return cls(growprune=gp, optimizer=opt, latency=lat, **data)
        except TypeError as exc:
            raise ConfigError(f"bad flow config {path}: {exc}") from exc


@dataclass
class FlowState:
    phase: str = "wg"
    epoch: int = 0
    best_metric: float = math.inf
    history: list = field(default_factory=list)
    d_s: int = 0
    d_h: int = 0
    active_params: int = 0

    def advance(self, phase: str) -> None:
        if PHASES.index(phase) < PHASES.index(self.phase):
            raise ContractViolation(f"phase regression {self.phase} -> {phase}")
        self.phase = phase


@dataclass
class ReportRow:
    step: str
    d_s: int
    d_h: int
    d_x: int
    total_params: int
    active_params: int
    valid_ppl: float
    latency_median_ns: float
    latency_mean_ns: float
    latency_p95_ns: float


@dataclass
class FlowReport:
    rows: list[ReportRow] = field(default_factory=list)
    complete: bool = False
    threshold: float = math.inf
    lhp_target: int | None = None

    CSV_HEADER = ["step", "d_s", "d_h", "d_x", "total_params", "active_params",
                  "valid_ppl", "latency_median_ns", "latency_mean_ns",
                  "latency_p95_ns"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.step, r.d_s, r.d_h, r.d_x, r.total_params,
                             r.active_params, repr(r.valid_ppl),
                             repr(r.latency_median_ns), repr(r.latency_mean_ns),
                             repr(r.latency_p95_ns)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "complete": self.complete,
            "threshold": self.threshold,
            "lhp_target": self.lhp_target,
            "rows": [vars(r) for r in self.rows],
        }, indent=2) + "\n"


@dataclass
class ParamCount:
    recurrent_total: int
    recurrent_active: int
    head_total: int
    head_active: int
    embedding: int

    @property
    def total(self) -> int:
        return self.recurrent_total + self.head_total + self.embedding

    @property
    def active(self) -> int:
        return self.recurrent_active + self.head_active + self.embedding


def _layer_counts(layer: MaskedLinear) -> tuple[int, int]:
    live_rows = int(layer.mask.any(axis=1).sum())
    total = layer.w.size + layer.b.size
    active = layer.active_count() + live_rows
    return total, active


def param_count(model: LMModel) -> ParamCount:
    rec_total = rec_active = 0
    for cell in model.cells:
        for layer in cell.layers():
            t, a = _layer_counts(layer)
            rec_total += t
            rec_active += a
    head_total, head_active = _layer_counts(model.head)
    return ParamCount(recurrent_total=rec_total, recurrent_active=rec_active,
                      head_total=head_total, head_active=head_active,
                      embedding=model.embedding.size)


def make_seed(cfg: FlowConfig, vocab_size: int, rng: np.random.Generator) -> LMModel:
    """Partially connected seed model: each masked layer keeps exactly
    ceil((1 - seed_sparsity) * size) randomly chosen active entries."""
    model = LMModel.create(vocab_size, cfg.d_x, cfg.d_s, cfg.d_h, rng,
                           depth=cfg.depth, dropout_h=cfg.optimizer.dropout_h)
    for layer in model.masked_layers():
        n = layer.w.size
        keep = int(math.ceil((1.0 - cfg.seed_sparsity) * n))
        chosen = rng.choice(n, size=keep, replace=False)
        mask = np.zeros(n)
        mask[chosen] = 1.0
        layer.mask = mask.reshape(layer.w.shape)
        layer.apply_mask()
    return model


# --- training loop -------------------------------------------------------------

class Trainer:
    """SGD with validation-plateau learning-rate decay, shared across phases."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.best_valid = math.inf
        self.stale = 0

    def epoch(self, model: LMModel, train_ids: np.ndarray, batch: int,
              seq_len: int, rng: np.random.Generator,
              grad_sink: dict | None = None) -> float:
        """One pass over the training stream; returns mean training NLL.

        grad_sink, when given, receives the epoch-averaged full gradient
        (dormant entries included) per masked layer, keyed by id(layer).
        """
        total_nll = 0.0
        count = 0
        batches = 0
        states = None
        sums = {id(l): np.zeros_like(l.w) for l in model.masked_layers()} \
            if grad_sink is not None else None
        for xs, ys in batch_windows(train_ids, batch, seq_len):
            logits, caches, states = unroll_forward(model, xs, init=states,
                                                    train=True, rng=rng)
            n_tok = xs.size
            nll = bptt(model, logits, caches, xs, ys, grad_scale=1.0 / n_tok)
            total_nll += nll
            count += n_tok
            batches += 1
            if sums is not None:
                for layer in model.masked_layers():
                    sums[id(layer)] += layer.grad_w
            for layer in model.masked_layers():
                sgd_step(layer, self.lr, self.cfg.weight_decay)
            sgd_update(model.embedding, model.embedding_grad, self.lr,
                       self.cfg.weight_decay)
            model.embedding_grad[...] = 0.0
            # detach state between windows
            states = [type(s)(h=s.h.copy(), c=s.c.copy()) for s in states]
        if count == 0:
            raise ContractViolation("training stream shorter than one window")
        if grad_sink is not None:
            for key, acc in sums.items():
                grad_sink[key] = acc / max(batches, 1)
        return total_nll / count

    def note_valid(self, valid_nll: float) -> None:
        if valid_nll < self.best_valid - 1e-6:
            self.best_valid = valid_nll
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.cfg.lr_patience:
                self.lr *= self.cfg.lr_decay
                self.stale = 0


def collect_bridging_gradients(model: LMModel, train_ids: np.ndarray,
                               batch: int, seq_len: int) -> dict:
    """Epoch-averaged loss gradients (no parameter updates), keyed by id(layer)."""
    sums = {id(l): np.zeros_like(l.w) for l in model.masked_layers()}
    batches = 0
    states = None
    for xs, ys in batch_windows(train_ids, batch, seq_len):
        logits, caches, states = unroll_forward(model, xs, init=states, train=False)
        bptt(model, logits, caches, xs, ys, grad_scale=1.0 / xs.size)
        for layer in model.masked_layers():
            sums[id(layer)] += layer.grad_w
        model.zero_grads()
        batches += 1
    return {k: v / max(batches, 1) for k, v in sums.items()}


# --- latency of the full model ---------------------------------------------------

def measure_model_latency(model: LMModel, lat: LatencyConfig) -> latlab.SampleStats:
    """Forward latency of the unrolled model (batch x seq per config).

    Virtual mode: deterministic closed-form sum over the per-layer active
    output dimensions, scaled by sequence length. Real mode: wall-clock
    timing of actual forwards.
    """
    if lat.mode == "virtual":
        total = 0.0
        for cell in model.cells:
            for layer in cell.layers():
                dim = max(int(layer.mask.any(axis=1).sum()), 1)
                total += lat.curve.latency_ns(dim)
        total += lat.curve.latency_ns(max(model.head.out_dim, 1))
        total *= lat.measure_seq
        return latlab.SampleStats(mean_ns=total, median_ns=total,
                                  p95_ns=total, runs=lat.runs)
    rng = make_rng(12345)
    tokens = rng.integers(0, model.vocab_size,
                          size=(lat.measure_batch, lat.measure_seq))
    unroll_forward(model, tokens)  # warmup
    times = np.empty(max(lat.runs, 5))
    for i in range(times.size):
        t0 = time.perf_counter_ns()
        unroll_forward(model, tokens)
        times[i] = time.perf_counter_ns() - t0
    return latlab._stats(times)


# --- checkpointing ----------------------------------------------------------------

def checkpoint_save(model: LMModel, meta: dict, path: str | Path) -> None:
    """Lossless npz snapshot: all matrices, masks, dims, and metadata."""
    arrays = {"embedding": model.embedding}
    layer_names = []
    for i, layer in enumerate(model.masked_layers()):
        arrays[f"w_{i}"] = layer.w
        arrays[f"mask_{i}"] = layer.mask
        arrays[f"b_{i}"] = layer.b
        layer_names.append(layer.name)
    meta_full = dict(meta)
    meta_full.update({
        "version": CHECKPOINT_VERSION,
        "layer_names": layer_names,
        "d_x": model.d_x,
        "d_s": model.cells[0].d_s,
        "d_h": model.cells[0].d_h,
        "depth": len(model.cells),
        "hidden_depth": model.cells[0].hidden_depth,
        "vocab_size": model.vocab_size,
        "dropout_h": model.dropout_h,
    })
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta_full).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def checkpoint_load(path: str | Path) -> tuple[LMModel, dict]:
    try:
        data = np.load(path)
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}")
    rng = make_rng(0)
    model = LMModel.create(meta["vocab_size"], meta["d_x"], meta["d_s"],
                           meta["d_h"], rng, depth=meta["depth"],
                           hidden_depth=meta["hidden_depth"],
                           dropout_h=meta["dropout_h"])
    model.embedding[...] = data["embedding"]
    for i, layer in enumerate(model.masked_layers()):
        layer.mask[...] = data[f"mask_{i}"]
        layer.w[...] = data[f"w_{i}"]
        layer.b[...] = data[f"b_{i}"]
        layer.name = meta["layer_names"][i]
        layer.apply_mask()
    return model, meta


# --- the flow ----------------------------------------------------------------------

class SynthesisFlow:
    def __init__(self, cfg: FlowConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        path = bundled_corpus_path() if cfg.corpus_path == "bundled" else cfg.corpus_path
        self.corpus: Corpus = load_corpus(path, cfg.train_frac, cfg.valid_frac)
        self.rng = make_rng(cfg.seed)
        self.state = FlowState(d_s=cfg.d_s, d_h=cfg.d_h)
        self.report = FlowReport()
        self.gp = cfg.growprune
        self.model: LMModel | None = None
        self.trainer: Trainer | None = None
        self.log = print

    # - helpers -

    def _valid_ppl(self, model: LMModel) -> float:
        return perplexity(evaluate(model, self.corpus.valid,
                                   seq_len=self.cfg.seq_len, batch=4))

    def _row(self, step: str, model: LMModel, ppl: float) -> ReportRow:
        counts = param_count(model)
        d_s, d_h = model.cells[0].active_dims()
        lat = measure_model_latency(model, self.cfg.latency)
        return ReportRow(step=step, d_s=d_s, d_h=d_h, d_x=model.d_x,
                         total_params=counts.total, active_params=counts.active,
                         valid_ppl=ppl, latency_median_ns=lat.median_ns,
                         latency_mean_ns=lat.mean_ns, latency_p95_ns=lat.p95_ns)

    def _snapshot(self):
        return (copy.deepcopy(self.model), self.trainer.lr)

    def _restore(self, snap) -> None:
        self.model, self.trainer.lr = copy.deepcopy(snap[0]), snap[1]

    def _save_phase_artifacts(self, tag: str) -> None:
        if self.out_dir is None:
            return
        checkpoint_save(self.model, {"phase": tag, "seed": self.cfg.seed},
                        self.out_dir / f"checkpoint_{tag}.npz")
        growprune.export_masks(self.model.masked_layers(),
                               self.out_dir / "masks", tag)

    def _train(self, epochs: int, grad_sink: dict | None = None) -> float:
        ppl = math.nan
        for _ in range(epochs):
            self.trainer.epoch(self.model, self.corpus.train, self.cfg.batch,
                               self.cfg.seq_len, self.rng, grad_sink=grad_sink)
            valid_nll = evaluate(self.model, self.corpus.valid,
                                 seq_len=self.cfg.seq_len, batch=4)
            self.trainer.note_valid(valid_nll)
            ppl = perplexity(valid_nll)
        return ppl

    # - steps -

    def train_baseline(self) -> float:
        """Dense model with the same dims; its validation perplexity is the
        default accuracy threshold and the baseline report row."""
        rng = make_rng(self.cfg.seed + 1)
        baseline = LMModel.create(self.corpus.vocab_size, self.cfg.d_x,
                                  self.cfg.d_s, self.cfg.d_h, rng,
                                  depth=self.cfg.depth,
                                  dropout_h=self.cfg.optimizer.dropout_h)
        trainer = Trainer(self.cfg.optimizer)
        ppl = math.inf
        for _ in range(self.cfg.baseline_epochs):
            trainer.epoch(baseline, self.corpus.train, self.cfg.batch,
                          self.cfg.seq_len, rng)
            nll = evaluate(baseline, self.corpus.valid,
                           seq_len=self.cfg.seq_len, batch=4)
            trainer.note_valid(nll)
            ppl = perplexity(nll)
        self.report.rows.append(self._row("baseline", baseline, ppl))
        if math.isinf(self.gp.accuracy_threshold):
            self.gp = replace(self.gp, accuracy_threshold=ppl)
        self.report.threshold = self.gp.accuracy_threshold
        return ppl

    def step_weight_growth(self) -> None:
        self.state.advance("wg")
        self.model = make_seed(self.cfg, self.corpus.vocab_size, self.rng)
        self.trainer = Trainer(self.cfg.optimizer)
        ppl = math.nan
        for ep in range(self.cfg.wg_epochs):
            sink: dict | None = {} if ep < self.cfg.growth_epochs else None
            self.trainer.epoch(self.model, self.corpus.train, self.cfg.batch,
                               self.cfg.seq_len, self.rng, grad_sink=sink)
            if sink is not None:
                for layer in self.model.masked_layers():
                    growprune.weight_grow(layer, sink[id(layer)], self.gp.g_w,
                                          self.trainer.lr)
            valid_nll = evaluate(self.model, self.corpus.valid,
                                 seq_len=self.cfg.seq_len, batch=4)
            self.trainer.note_valid(valid_nll)
            ppl = perplexity(valid_nll)
            self.log(f"[wg] epoch {ep + 1}/{self.cfg.wg_epochs} "
                     f"valid ppl {ppl:.3f} active {param_count(self.model).active}")
        self.report.rows.append(self._row("wg", self.model, ppl))
        self._save_phase_artifacts("wg")

    def _prune_loop(self, label: str, prune_once, halve) -> float:
        """Shared prune -> retrain -> halve-or-stop loop with checkpoint
        restore; returns the final (passing) validation perplexity."""
        gp = self.gp
        single_mode = False
        last_ppl = self._valid_ppl(self.model)
        for _ in range(self.cfg.max_prune_iters):
            snap = self._snapshot()
            try:
                pruned = prune_once(gp, single_mode)
            except growprune.DegenerateLayerError:
                self._restore(snap)
                break
            if not pruned:
                break
            ppl = self._train(gp.retrain_patience)
            gp, decision = halve(gp, ppl, single_mode)
            if decision is HalveDecision.CONTINUE:
                last_ppl = ppl
                self.log(f"[{label}] kept prune, valid ppl {ppl:.3f}")
                continue
            self._restore(snap)
            self.log(f"[{label}] reverted prune ({decision.value}), ppl {ppl:.3f}")
            if decision is HalveDecision.SINGLE_MODE:
                single_mode = True
            elif decision is HalveDecision.STOP:
                break
        self.gp = replace(self.gp, p_r=gp.p_r, p_c=gp.p_c, p_w=gp.p_w)
        return last_ppl

    def step_rc_prune(self) -> None:
        self.state.advance("rcp")

        def prune_once(gp, single_mode):
            cell = self.model.cells[0]
            before = cell.active_dims()
            if single_mode:
                after = growprune.coordinated_rc_prune_counts(
                    cell, self.model.head, 1, 1)
            else:
                after = growprune.coordinated_rc_prune(cell, self.model.head,
                                                       gp.p_r, gp.p_c)
            return after != before

        def halve(gp, ppl, single_mode):
            return growprune.halve_on_violation(gp, ppl, single_mode)

        ppl = self._prune_loop("rcp", prune_once, halve)
        self.report.rows.append(self._row("rcp", self.model, ppl))
        self._save_phase_artifacts("rcp")

    def _hysteresis_map(self) -> latlab.HysteresisMap:
        if self.cfg.profile_path:
            profile = latlab.load_profile(self.cfg.profile_path)
        else:
            lo, hi, step = self.cfg.profile_grid
            grid = list(range(lo, hi + 1, step))
            if self.cfg.latency.mode == "virtual":
                backend = latlab.SyntheticBackend(self.cfg.latency.curve)
            else:
                backend = latlab.NativeBackend(seed=self.cfg.seed)
            profile = latlab.sweep(backend, grid, self.cfg.latency.measure_batch,
                                   latlab.SweepConfig(hardware_id="flow"))
        return latlab.detect_lhps(profile)

    def step_rc_grow(self) -> None:
        self.state.advance("rcg")
        hmap = self._hysteresis_map()
        cell = self.model.cells[0]
        cur_s, cur_h = cell.active_dims()
        tied = max(cur_s, cur_h)
        target = latlab.nearest_lhp(hmap, tied)
        self.report.lhp_target = target.dim
        if target.found and target.dim > tied:
            target_dim = min(target.dim, self.cfg.d_s)
            grads = collect_bridging_gradients(self.model, self.corpus.train,
                                               self.cfg.batch, self.cfg.seq_len)
            growprune.coordinated_rc_grow_counts(
                cell, self.model.head, grads,
                target_dim - cur_s, target_dim - cur_h, self.trainer.lr)
            self.log(f"[rcg] grew tied dim {tied} -> {target_dim}")
        else:
            self.log(f"[rcg] dim {tied} already at an LHP; no growth")
        ppl = self._train(self.cfg.rcg_epochs) if self.cfg.rcg_epochs \
            else self._valid_ppl(self.model)
        self.report.rows.append(self._row("rcg", self.model, ppl))
        self._save_phase_artifacts("rcg")

    def step_weight_prune(self) -> None:
        self.state.advance("wp")

        def prune_once(gp, _single_mode):
            total = 0
            for layer in self.model.masked_layers():
                total += growprune.weight_prune(layer, gp.p_w)
            return total

        def halve(gp, ppl, _single_mode):
            return growprune.halve_weight_ratio(gp, ppl)

        ppl = self._prune_loop("wp", prune_once, halve)
        for layer in self.model.masked_layers():
            layer.apply_mask()
        self.report.rows.append(self._row("wp", self.model, ppl))
        self._save_phase_artifacts("wp")
        self.state.advance("done")

    def run(self) -> FlowReport:
        try:
            self.train_baseline()
            self.step_weight_growth()
            if not self.cfg.cpu_mode:
                self.step_rc_prune()
                self.step_rc_grow()
            self.step_weight_prune()
            self.report.complete = True
        finally:
            if self.out_dir is not None:
                (self.out_dir / "report.csv").write_text(
                    self.report.to_csv(), encoding="utf-8")
                (self.out_dir / "report.json").write_text(
                    self.report.to_json(), encoding="utf-8")
        return self.report


def run_flow(cfg: FlowConfig, out_dir: str | Path | None = None,
             log=print) -> FlowReport:
    flow = SynthesisFlow(cfg, out_dir)
    flow.log = log
    flow.run()
    return flow.report
