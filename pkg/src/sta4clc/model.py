"""Model: disaster-aware temporal attention, relation-aware graph attention,
fusion and the composite training objective.

The temporal encoder runs multi-head self-attention over each block's weekly
feature matrix, optionally biasing the attention logits with the cumulative
disaster-decay sequence (recomputed from the learnable decay rate on every
forward pass).  The spatial encoder runs one edge-aware GAT per relation and
mixes relation outputs with a per-node soft attention.  Fused embeddings feed
a tanh-bounded regression head and a 3-class head; the loss adds a
graph-diffusion residual penalty with separate coefficients for expanding and
declining blocks.

All linear maps are algebraically folded to keep full-batch training cheap:
per-head Q/K/V projections are composed with the input projection before
touching the (samples, T, ·) tensors, and the post-attention mean-pool over
time is applied to the attention matrix before the value product (both exact
rewrites of the layer definition).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, autodiff as ad
from .data import CLASS_NAMES
from .graphs import MultiRelationalGraph, laplacian

MASK_FILL = -1e30


def _fused_attention_pooled(scores: ad.Node, bias: ad.Node, scale: float):
    """mean-over-queries of row_softmax(scores * scale + bias) as one fused op.

    bias is (S, T) and broadcasts over query rows.  Equivalent to composing
    mul/add/row_softmax/mean.  Returns (pooled (S, T) Node, attention array).
    """
    attn = _kernels.attn_softmax(scores.value, bias.value, scale)
    pooled = attn.mean(axis=1)

    def bwd(g, needs):
        dscores, dbias = _kernels.attn_pool_bwd(attn, g, scale)
        return (dscores if needs[0] else None, dbias if needs[1] else None)

    return ad.Node(pooled, (scores, bias), bwd), attn


def _fused_gat_logits(left: ad.Node, right: ad.Node, u: ad.Node,
                      efeat: np.ndarray, mask: np.ndarray, slope: float) -> ad.Node:
    """leaky_relu(left_i + right_j + u * efeat_ij) with non-edges masked to
    MASK_FILL; one kernel instead of the add/mul/leaky/masked_fill chain."""
    out, pos = _kernels.gat_logits(left.value, right.value, u.value[0, 0],
                                   efeat, mask, slope, MASK_FILL)

    def bwd(g, needs):
        dleft, dright, du = _kernels.gat_logits_bwd(g, pos, mask, efeat, slope)
        return (dleft if needs[0] else None,
                dright if needs[1] else None,
                np.array([[du]]) if needs[2] else None)

    return ad.Node(out, (left, right, u), bwd)


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    attention_heads: int = 4
    gat_heads: int = 2
    leaky_slope: float = 0.2
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    lambda_diff: float = 0.05
    use_disaster_bias: bool = True
    use_diffusion_loss: bool = True
    use_multi_relation: bool = True
    share_gat_parameters: bool = False
    epochs: int = 60
    lr: float = 0.005
    seed: int = 42

    def __post_init__(self):
        if self.hidden_dim % self.attention_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by "
                             f"attention_heads {self.attention_heads}")
        if self.hidden_dim % self.gat_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by "
                             f"gat_heads {self.gat_heads}")
        for name in ("lambda_cls", "lambda_reg", "lambda_diff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def with_flags(self, disaster: bool, diffusion: bool, multi: bool) -> "ModelConfig":
        return replace(self, use_disaster_bias=disaster, use_diffusion_loss=diffusion,
                       use_multi_relation=multi)


@dataclass(frozen=True)
class PredictionRecord:
    block_id: str
    period_id: int
    delta_y_hat: float
    class_logits: np.ndarray
    label: int

    @property
    def label_name(self) -> str:
        return CLASS_NAMES[self.label]


def sinusoidal_encoding(T: int, dim: int) -> np.ndarray:
    """Fixed transformer-style positional encoding, (T, dim)."""
    pos = np.arange(T)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    out = np.empty((T, dim))
    out[:, 0::2] = np.sin(angle[:, 0::2])
    out[:, 1::2] = np.cos(angle[:, 1::2])
    return out


# ---------------------------------------------------------------------------
# batch preparation (constant tensors shared by every epoch)


@dataclass
class PeriodTensors:
    severities: np.ndarray  # (n, K) per-block event severities, node order
    decay_dt: np.ndarray    # (K, T) local week minus event week
    decay_mask: np.ndarray  # (K, T) 1.0 from the event week onward


@dataclass
class Batch:
    X: np.ndarray            # (S, T, 6) standardized
    z: np.ndarray            # (S, d) standardized
    delta_y: np.ndarray      # (S,)
    labels: np.ndarray       # (S,)
    n_nodes: int
    n_periods: int
    block_ids: list
    period_ids: list
    rel_masks: list          # R x (n, n) bool, self-loop diagonal set
    rel_efeat: list          # R x (n, n) float, log1p of raw edge weight
    rel_active: np.ndarray   # (n, R) bool
    L: np.ndarray            # (n, n) adjacency Laplacian
    period_events: list      # n_periods x PeriodTensors
    T: int = field(init=False)

    def __post_init__(self):
        self.T = self.X.shape[1]

    def period_slice(self, p: int) -> slice:
        return slice(p * self.n_nodes, (p + 1) * self.n_nodes)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_relations(self) -> int:
        return len(self.rel_masks)


def assemble_batch(X: np.ndarray, z: np.ndarray, delta_y: np.ndarray,
                   labels: np.ndarray, block_ids: list, periods: list,
                   disasters: list, T: int,
                   graph: MultiRelationalGraph) -> Batch:
    """Freeze every constant the forward pass needs into dense tensors."""
    n = graph.n_nodes
    if len(block_ids) != n:
        raise ValueError(f"feature node count {len(block_ids)} != graph n_nodes {n}")
    block_index = {bid: i for i, bid in enumerate(block_ids)}

    rel_masks, rel_efeat = [], []
    active = np.zeros((n, graph.R), dtype=bool)
    for r, rel in enumerate(graph.relations):
        w = rel.dense_weight_matrix(n)
        mask = w > 0
        degree = mask.any(axis=1)
        np.fill_diagonal(mask, True)
        rel_masks.append(mask)
        rel_efeat.append(np.log1p(w))
        active[:, r] = True if r == 0 else degree
    active[:, 0] = True  # adjacency always carries its self-loop

    period_events = []
    for period in periods:
        rows = []
        sev_cols = []
        for event in disasters:
            sev = np.zeros(n)
            for bid, s in event.severity_by_block.items():
                sev[block_index[bid]] = s
            offsets = np.arange(T, dtype=np.float64) + period.start_week - event.week
            rows.append(offsets)
            sev_cols.append(sev)
        if rows:
            dt = np.stack(rows)                      # (K, T)
            mask = (dt >= 0).astype(np.float64)
            dt = dt * mask                           # keep exp argument bounded
            sev_mat = np.stack(sev_cols, axis=1)     # (n, K)
        else:
            dt = np.zeros((0, T))
            mask = np.zeros((0, T))
            sev_mat = np.zeros((n, 0))
        period_events.append(PeriodTensors(severities=sev_mat, decay_dt=dt,
                                           decay_mask=mask))

    return Batch(X=X, z=z, delta_y=delta_y, labels=labels,
                 n_nodes=n, n_periods=len(periods),
                 block_ids=list(block_ids),
                 period_ids=[p.period_id for p in periods],
                 rel_masks=rel_masks, rel_efeat=rel_efeat, rel_active=active,
                 L=laplacian(graph.relations[0], n), period_events=period_events)


def prepare_batch(X: np.ndarray, z: np.ndarray, feats, dataset,
                  graph: MultiRelationalGraph) -> Batch:
    """`assemble_batch` fed from a FeatureSet and its Dataset."""
    return assemble_batch(X, z, feats.delta_y, feats.labels, feats.block_ids,
                          feats.periods, dataset.disasters, dataset.T, graph)


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng, fan_in, fan_out, shape=None):
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape if shape is not None else (fan_in, fan_out))


def init_parameters(config: ModelConfig, d_static: int, n_relations: int,
                    rng: np.random.Generator | None = None) -> dict:
    """Fresh parameter dict; iteration order is the serialization order."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    H = config.hidden_dim
    dh = H // config.attention_heads
    dg = H // config.gat_heads
    p = {}
    p["temporal/W_in"] = _glorot(rng, 6, H)
    p["temporal/b_in"] = np.zeros(H)
    for h in range(config.attention_heads):
        p[f"temporal/Wq{h}"] = _glorot(rng, H, dh)
        p[f"temporal/Wk{h}"] = _glorot(rng, H, dh)
        p[f"temporal/Wv{h}"] = _glorot(rng, H, dh)
    p["temporal/W_o"] = _glorot(rng, H, H)
    p["temporal/b_o"] = np.zeros(H)
    # decay rate alpha = softplus(rho); start at a ~4-week half-life
    p["decay/rho_alpha"] = np.full((1, 1), math.log(math.expm1(math.log(2.0) / 4.0)))
    p["spatial/W_z"] = _glorot(rng, d_static, H)
    p["spatial/b_z"] = np.zeros(H)
    gat_sets = 1 if config.share_gat_parameters else n_relations
    for r in range(gat_sets):
        for g in range(config.gat_heads):
            p[f"gat/r{r}/W{g}"] = _glorot(rng, H, dg)
            p[f"gat/r{r}/al{g}"] = _glorot(rng, dg, 1)
            p[f"gat/r{r}/ar{g}"] = _glorot(rng, dg, 1)
            p[f"gat/r{r}/u{g}"] = np.zeros((1, 1))
    if config.share_gat_parameters:
        for r in range(n_relations):
            p[f"gat/bias{r}"] = np.zeros((1, 1))
    p["relattn/W_a"] = _glorot(rng, H, H)
    p["relattn/w_a"] = _glorot(rng, H, 1)
    p["fusion/W_f"] = _glorot(rng, 2 * H, H)
    p["fusion/b_f"] = np.zeros(H)
    p["head/W_out"] = _glorot(rng, H, 1)
    p["head/b_out"] = np.zeros(1)
    p["head/W_cls"] = _glorot(rng, H, 3)
    p["head/b_cls"] = np.zeros(3)
    p["diffusion/a_plus"] = np.full((1, 1), 0.1)
    p["diffusion/a_minus"] = np.full((1, 1), 0.1)
    return p


def wrap_parameters(params: dict) -> dict:
    return {k: ad.parameter(v) for k, v in params.items()}


def softplus_alpha(p: dict) -> ad.Node:
    """alpha > 0 via softplus of the raw decay parameter."""
    rho = p["decay/rho_alpha"]
    return ad.log(ad.add(ad.exp(rho), 1.0))


# ---------------------------------------------------------------------------
# encoders


def decay_bias(p: dict, batch: Batch) -> ad.Node | None:
    """Per-sample decay sequences (S, T) from the current alpha, or None."""
    alpha = softplus_alpha(p)
    parts = []
    for pt in batch.period_events:
        if pt.decay_dt.shape[0] == 0:
            parts.append(ad.constant(np.zeros((batch.n_nodes, batch.T))))
            continue
        decayed = ad.mul(ad.exp(ad.mul(ad.neg(alpha), pt.decay_dt)), pt.decay_mask)
        parts.append(ad.matmul(ad.constant(pt.severities), decayed))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def temporal_encode(p: dict, X, bias, config: ModelConfig, probes: dict | None = None):
    """Multi-head temporal self-attention, mean-pooled over time -> (S, H).

    `bias` is an (S, T) Node added along the key axis of every attention row,
    or None when the disaster bias is disabled.
    """
    X = ad._wrap(X)
    S, T, _ = X.value.shape
    H = config.hidden_dim
    dh = H // config.attention_heads
    pe = sinusoidal_encoding(T, H)
    pe_b = ad.add(ad.constant(pe), p["temporal/b_in"])  # (T, H)
    scale = 1.0 / math.sqrt(dh)
    if bias is None:
        bias = ad.constant(np.zeros((S, T)))

    heads = []
    for h in range(config.attention_heads):
        q = ad.add(ad.matmul(X, ad.matmul(p["temporal/W_in"], p[f"temporal/Wq{h}"])),
                   ad.matmul(pe_b, p[f"temporal/Wq{h}"]))
        k = ad.add(ad.matmul(X, ad.matmul(p["temporal/W_in"], p[f"temporal/Wk{h}"])),
                   ad.matmul(pe_b, p[f"temporal/Wk{h}"]))
        v = ad.add(ad.matmul(X, ad.matmul(p["temporal/W_in"], p[f"temporal/Wv{h}"])),
                   ad.matmul(pe_b, p[f"temporal/Wv{h}"]))
        scores = ad.matmul(q, ad.transpose(k))                  # (S, T, T)
        # mean over the query axis fused in: pooling commutes with the value product
        pooled, attn = _fused_attention_pooled(scores, bias, scale)  # (S, T)
        if probes is not None:
            probes.setdefault("temporal_attention", []).append(attn)
        heads.append(ad.reshape(ad.matmul(ad.reshape(pooled, (S, 1, T)), v), (S, dh)))
    h_cat = ad.concat(heads, axis=1)
    return ad.add(ad.matmul(h_cat, p["temporal/W_o"]), p["temporal/b_o"])


def gat_relation(p: dict, r: int, h: ad.Node, batch: Batch, config: ModelConfig,
                 probes: dict | None = None) -> ad.Node:
    """Edge-aware graph attention for one relation -> (n, H)."""
    mask = batch.rel_masks[r]
    efeat = batch.rel_efeat[r]
    key = 0 if config.share_gat_parameters else r
    outs = []
    for g in range(config.gat_heads):
        wh = ad.matmul(h, p[f"gat/r{key}/W{g}"])                 # (n, dg)
        left = ad.matmul(wh, p[f"gat/r{key}/al{g}"])             # (n, 1)
        right = ad.matmul(wh, p[f"gat/r{key}/ar{g}"])            # (n, 1)
        if config.share_gat_parameters:
            left = ad.add(left, p[f"gat/bias{r}"])
        logits = _fused_gat_logits(left, right, p[f"gat/r{key}/u{g}"],
                                   efeat, mask, config.leaky_slope)
        attn = ad.row_softmax(logits)
        if probes is not None:
            probes.setdefault("gat_attention", []).append(attn.value)
        outs.append(ad.matmul(attn, wh))
    return ad.concat(outs, axis=1)


def relation_aggregate(p: dict, h_rs: list, active: np.ndarray,
                       probes: dict | None = None) -> ad.Node:
    """Soft attention over relation embeddings -> (n, H).

    Relations where a node has no edges are masked out of its softmax; the
    adjacency relation is always available.
    """
    R = len(h_rs)
    scores = [ad.matmul(ad.tanh(ad.matmul(h_r, p["relattn/W_a"])), p["relattn/w_a"])
              for h_r in h_rs]
    stacked = ad.concat(scores, axis=1)                          # (n, R)
    stacked = ad.masked_fill(stacked, ~active[:, :R], MASK_FILL)
    alphas = ad.row_softmax(stacked)
    if probes is not None:
        probes["relation_alphas"] = alphas.value
    out = None
    eye = np.eye(R)
    for r, h_r in enumerate(h_rs):
        weight = ad.matmul(alphas, ad.constant(eye[:, r:r + 1]))  # (n, 1)
        term = ad.mul(weight, h_r)
        out = term if out is None else ad.add(out, term)
    return out


def spatial_encode(p: dict, batch: Batch, config: ModelConfig,
                   probes: dict | None = None) -> ad.Node:
    """Relation-aware spatial embedding for every sample -> (S, H)."""
    h_node = ad.add(ad.matmul(ad.constant(batch.z), p["spatial/W_z"]), p["spatial/b_z"])
    n_rel = batch.n_relations if config.use_multi_relation else 1
    parts = []
    for pi in range(batch.n_periods):
        sl = batch.period_slice(pi)
        h_p = ad.gather_rows(h_node, np.arange(sl.start, sl.stop))
        h_rs = [gat_relation(p, r, h_p, batch, config, probes) for r in range(n_rel)]
        parts.append(relation_aggregate(p, h_rs, batch.rel_active, probes))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def forward(p: dict, batch: Batch, config: ModelConfig, probes: dict | None = None):
    """Regression and classification outputs for every sample.

    Returns (delta (S,1) Node in (-1,1), logits (S,3) Node).
    """
    bias = decay_bias(p, batch) if config.use_disaster_bias else None
    if probes is not None and bias is not None:
        probes["decay"] = bias.value
    h_temp = temporal_encode(p, batch.X, bias, config, probes)
    h_spatial = spatial_encode(p, batch, config, probes)
    fused = ad.relu(ad.add(ad.matmul(ad.concat([h_temp, h_spatial], axis=1),
                                     p["fusion/W_f"]),
                           p["fusion/b_f"]))
    delta = ad.tanh(ad.add(ad.matmul(fused, p["head/W_out"]), p["head/b_out"]))
    logits = ad.add(ad.matmul(fused, p["head/W_cls"]), p["head/b_cls"])
    return delta, logits


def predict_records(params: dict, batch: Batch, config: ModelConfig) -> list:
    """Run the network on plain arrays and package per-sample records."""
    delta, logits = forward(wrap_parameters(params), batch, config)
    out = []
    for s in range(batch.n_samples):
        node = s % batch.n_nodes
        period = batch.period_ids[s // batch.n_nodes]
        lg = logits.value[s]
        out.append(PredictionRecord(block_id=batch.block_ids[node],
                                    period_id=period,
                                    delta_y_hat=float(delta.value[s, 0]),
                                    class_logits=lg.copy(),
                                    label=int(np.argmax(lg))))
    return out


# ---------------------------------------------------------------------------
# losses


def diffusion_loss(delta: ad.Node, L: np.ndarray, a_plus: ad.Node, a_minus: ad.Node,
                   lam_diff: float) -> ad.Node:
    """Directional graph-diffusion residual penalty for one period.

    Residual = delta - a * (L delta), with a = a_plus on strictly positive
    predictions and a_minus on strictly negative ones; each side contributes
    the mean of its squared residuals.  Zero predictions belong to neither
    side; an empty side contributes nothing.
    """
    vals = delta.value.reshape(-1)
    l_delta = ad.matmul(ad.constant(L), delta)
    total = None
    for side_mask, a in (((vals > 0), a_plus), ((vals < 0), a_minus)):
        count = int(side_mask.sum())
        if count == 0:
            continue
        res = ad.sub(delta, ad.mul(a, l_delta))
        picked = ad.mul(ad.square(res), side_mask.reshape(-1, 1).astype(np.float64))
        term = ad.mul(ad.sum_(picked), 1.0 / count)
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.constant(np.zeros(()))
    return ad.mul(total, lam_diff)


def cross_entropy(logits: ad.Node, labels: np.ndarray) -> ad.Node:
    """Mean cross-entropy of 3-class logits against integer labels."""
    m = logits.value.shape[0]
    onehot = np.zeros((m, logits.value.shape[1]))
    onehot[np.arange(m), labels] = 1.0
    logp = ad.log(ad.row_softmax(logits))
    return ad.neg(ad.mean(ad.sum_(ad.mul(logp, onehot), axis=1)))


def total_loss(p: dict, delta: ad.Node, logits: ad.Node, batch: Batch,
               config: ModelConfig, train_idx: np.ndarray):
    """Composite objective; returns (loss Node, component floats)."""
    train_idx = np.asarray(train_idx, dtype=np.intp)
    if train_idx.size == 0:
        raise ValueError("empty training index set")
    l_cls = cross_entropy(ad.gather_rows(logits, train_idx), batch.labels[train_idx])
    targets = batch.delta_y[train_idx].reshape(-1, 1)
    l_reg = ad.mean(ad.square(ad.sub(ad.gather_rows(delta, train_idx), targets)))
    loss = ad.add(ad.mul(l_cls, config.lambda_cls), ad.mul(l_reg, config.lambda_reg))
    l_diff_value = 0.0
    if config.use_diffusion_loss and config.lambda_diff > 0:
        per_period = []
        for pi in range(batch.n_periods):
            sl = batch.period_slice(pi)
            delta_p = ad.gather_rows(delta, np.arange(sl.start, sl.stop))
            per_period.append(diffusion_loss(delta_p, batch.L,
                                             p["diffusion/a_plus"],
                                             p["diffusion/a_minus"],
                                             config.lambda_diff))
        l_diff = per_period[0]
        for t in per_period[1:]:
            l_diff = ad.add(l_diff, t)
        l_diff = ad.mul(l_diff, 1.0 / batch.n_periods)
        loss = ad.add(loss, l_diff)
        l_diff_value = float(l_diff.value)
    components = {"total": float(loss.value), "cls": float(l_cls.value),
                  "reg": float(l_reg.value), "diff": l_diff_value}
    return loss, components
