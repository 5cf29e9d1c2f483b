"""Typed message passing with physics-biased attention over bus-phase graphs.

The estimator is an L-layer encoder. Each layer computes directed edge
messages with device-type-specific weights, scores edges with a learned
term plus a structural prior (low impedance, phase match, transformer or
regulator membership, short length), normalizes scores within each
receiver's neighborhood, and applies a residual MLP update with layer
normalization. Open or phase-incompatible edges are dropped before any
arithmetic, so disabled paths cannot influence results even through
softmax normalization.

After the last layer a substation conditioning step pools embeddings per
feeder, averages feeder pools into a per-graph context, applies
feature-wise affine modulation, and scales each feeder by a scalar gate.
A node-wise two-layer decoder maps embeddings to voltage magnitude.

Parameters split into two freezing groups: "backbone" (input projection,
layers 1..L-1, prior coefficients) and "head" (last layer, conditioning,
gates, decoder). Transfer to a new substation trains the head only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network as net
from .dataset import write_npz
from .seeding import rng as _rng

CHECKPOINT_FORMAT = "gridvolt-checkpoint/v1"
N_EDGE_TYPES = 4  # line, cable, transformer/regulator, switch

_DEV_COLS = slice(net.EDGE_FEATURE_INDEX["dev_line"],
                  net.EDGE_FEATURE_INDEX["dev_switch"] + 1)
_PH_COLS = slice(net.NODE_FEATURE_INDEX["phase_a"],
                 net.NODE_FEATURE_INDEX["phase_c"] + 1)
_EDGE_PH_COLS = slice(net.EDGE_FEATURE_INDEX["phase_a"],
                      net.EDGE_FEATURE_INDEX["phase_c"] + 1)


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    n_layers: int = 4
    decoder_hidden: int = 64
    temperature: float = 1.0
    beta_init: tuple[float, float, float, float] = (1.0, 1.0, 0.5, 0.5)
    sensor_gain: float = 25.0   # init-time amplification of the sensor rows

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers to split freezing groups")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.sensor_gain < 0:
            raise ValueError("sensor_gain must be non-negative")

    def to_dict(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "n_layers": self.n_layers,
                "decoder_hidden": self.decoder_hidden,
                "temperature": self.temperature,
                "beta_init": list(self.beta_init),
                "sensor_gain": self.sensor_gain}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["beta_init"] = tuple(d["beta_init"])
        return cls(**d)


class ModelParams:
    """Named parameter tensors plus the feeder-gate row mapping."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ad.Tensor],
                 feeder_rows: dict[int, int]):
        self.config = config
        self.tensors = tensors
        self.feeder_rows = dict(feeder_rows)

    @classmethod
    def create(cls, config: ModelConfig, feeder_ids: list[int],
               seed: int = 0) -> "ModelParams":
        d = config.hidden_dim
        dh = config.decoder_hidden
        n_in = net.N_NODE_FEATURES
        n_edge = net.N_EDGE_FEATURES
        cat = 2 * d + n_edge
        feeder_rows = {int(f): k for k, f in enumerate(sorted(set(feeder_ids)))}
        if net.HUB_FEEDER in feeder_rows:
            raise ValueError("the hub pseudo-feeder cannot have a gate")

        def w(name, shape, scale=None):
            gen = _rng(seed, "model-init", name)
            scale = scale if scale is not None else 1.0 / np.sqrt(shape[0])
            return ad.Tensor(gen.normal(0.0, scale, size=shape),
                             requires_grad=True, name=name)

        def const(name, values):
            return ad.Tensor(np.asarray(values, dtype=np.float64),
                             requires_grad=True, name=name)

        t: dict[str, ad.Tensor] = {}
        t["input.W"] = w("input.W", (n_in, d))
        # The sensor reading sits near 1.0 pu, so its informative part (the
        # deviation from nominal) is tiny next to the 0/1 mask toggle and the
        # gradient never amplifies it at these learning rates. Tie the two
        # sensor rows anti-symmetrically at a larger scale: an observed node
        # contributes kappa*(v-1) to the embedding and a masked node exactly
        # zero, so the deviation enters at O(1) from the first step.
        kap = _rng(seed, "model-init", "sensor-rows").normal(
            0.0, config.sensor_gain / np.sqrt(n_in), size=d)
        t["input.W"].values[net.NODE_FEATURE_INDEX["m_obs_v_pu"]] = kap
        t["input.W"].values[net.NODE_FEATURE_INDEX["m_obs"]] = -kap
        t["input.b"] = const("input.b", np.zeros(d))
        t["beta"] = const("beta", np.array(config.beta_init)[:, None])
        for layer in range(config.n_layers):
            p = f"layer{layer}."
            for r in range(N_EDGE_TYPES):
                t[p + f"msg{r}"] = w(p + f"msg{r}", (cat, d))
            t[p + "att_W"] = w(p + "att_W", (cat, d))
            t[p + "att_a"] = w(p + "att_a", (d, 1))
            t[p + "phi_W1"] = w(p + "phi_W1", (d, d))
            t[p + "phi_b1"] = const(p + "phi_b1", np.zeros(d))
            t[p + "phi_W2"] = w(p + "phi_W2", (d, d))
            t[p + "phi_b2"] = const(p + "phi_b2", np.zeros(d))
            t[p + "norm_gain"] = const(p + "norm_gain", np.ones(d))
            t[p + "norm_bias"] = const(p + "norm_bias", np.zeros(d))
        t["film.Wg"] = w("film.Wg", (d, d), scale=0.01 / np.sqrt(d))
        t["film.bg"] = const("film.bg", np.ones(d))
        t["film.Wb"] = w("film.Wb", (d, d), scale=0.01 / np.sqrt(d))
        t["film.bb"] = const("film.bb", np.zeros(d))
        t["eta"] = const("eta", np.ones((len(feeder_rows), 1)))
        t["decoder.W1"] = w("decoder.W1", (d, dh))
        t["decoder.b1"] = const("decoder.b1", np.zeros(dh))
        t["decoder.W2"] = w("decoder.W2", (dh, 1), scale=0.01)
        t["decoder.b2"] = const("decoder.b2", np.array([1.0]))
        return cls(config, t, feeder_rows)

    # -- freezing groups ----------------------------------------------------

    def backbone_names(self) -> list[str]:
        names = ["input.W", "input.b", "beta"]
        for layer in range(self.config.n_layers - 1):
            names.extend(n for n in self.tensors if n.startswith(f"layer{layer}."))
        return names

    def head_names(self) -> list[str]:
        last = f"layer{self.config.n_layers - 1}."
        names = [n for n in self.tensors if n.startswith(last)]
        names.extend(n for n in self.tensors
                     if n.startswith("film.") or n.startswith("decoder.")
                     or n == "eta")
        return names

    def group_of(self, name: str) -> str:
        if name in set(self.backbone_names()):
            return "backbone"
        if name in set(self.head_names()):
            return "head"
        raise KeyError(name)

    def trainable(self, names: list[str] | None = None) -> list[ad.Tensor]:
        names = list(self.tensors) if names is None else names
        return [self.tensors[n] for n in names]

    def replace_eta(self, feeder_ids: list[int]) -> None:
        """Fresh unit gates for a new set of feeders (transfer setup)."""
        self.feeder_rows = {int(f): k
                            for k, f in enumerate(sorted(set(feeder_ids)))}
        self.tensors["eta"] = ad.Tensor(
            np.ones((len(self.feeder_rows), 1)), requires_grad=True, name="eta")


# ---------------------------------------------------------------------------
# batch assembly


@dataclass
class BatchItem:
    """One snapshot prepared for batching; features already masked."""

    node_x: np.ndarray          # [N, 17]
    edge_from: np.ndarray       # [E] undirected device-phase edges
    edge_to: np.ndarray
    edge_z: np.ndarray          # [E, 13]
    node_feeder: np.ndarray     # [N] effective feeder ids
    v_true: np.ndarray          # [N]
    observed: np.ndarray        # [N] bool
    phys_from: np.ndarray       # physics-loss edges (subset, undirected)
    phys_to: np.ndarray
    phys_r: np.ndarray
    phys_x: np.ndarray
    phys_p: np.ndarray
    phys_q: np.ndarray
    hub_residual: float         # |sum of head flows + aux - transformer flow|


def item_from_view(view, observed: np.ndarray) -> BatchItem:
    """Mask a stored snapshot and collect the loss-side arrays."""
    node_x = net.apply_mask_to_features(view.node_features, view.v_true,
                                        observed)
    sel = np.flatnonzero(view.edge_phys)
    r_col = net.EDGE_FEATURE_INDEX["r_pu"]
    x_col = net.EDGE_FEATURE_INDEX["x_pu"]
    hub_gap = abs(sum(view.head_s.values()) + view.s_aux - view.s_subxfmr)
    return BatchItem(
        node_x=node_x, edge_from=view.edge_from, edge_to=view.edge_to,
        edge_z=view.edge_features, node_feeder=view.node_feeder,
        v_true=view.v_true, observed=np.asarray(observed, dtype=bool),
        phys_from=view.edge_from[sel], phys_to=view.edge_to[sel],
        phys_r=view.edge_features[sel, r_col],
        phys_x=view.edge_features[sel, x_col],
        phys_p=view.edge_p[sel], phys_q=view.edge_q[sel],
        hub_residual=float(hub_gap))


def status_gate(edge_z: np.ndarray, phase_i: np.ndarray,
                phase_j: np.ndarray) -> np.ndarray:
    """1 where the edge is closed and both endpoint phases lie in its mask."""
    status = edge_z[:, net.EDGE_FEATURE_INDEX["status"]]
    mask = edge_z[:, _EDGE_PH_COLS]
    ok_i = np.einsum("ep,ep->e", mask, phase_i) > 0
    ok_j = np.einsum("ep,ep->e", mask, phase_j) > 0
    return ((status == 1.0) & ok_i & ok_j).astype(np.float64)


@dataclass
class GraphBatch:
    """Disjoint union of snapshots with gated, receiver-sorted edges."""

    node_x: np.ndarray
    recv: np.ndarray
    send: np.ndarray
    edge_z: np.ndarray
    edge_type: np.ndarray
    prior: np.ndarray           # [E, 4] structural prior features
    n_nodes: int
    n_graphs: int
    graph_of_node: np.ndarray
    film_nodes: np.ndarray      # node ids sorted by (graph, feeder), hub excluded
    film_seg: np.ndarray        # pooling segment id per film node
    film_n_seg: int
    film_seg_graph: np.ndarray  # graph id per pooling segment
    eta_idx: np.ndarray
    eta_known: np.ndarray
    v_true: np.ndarray
    observed: np.ndarray
    phys_from: np.ndarray
    phys_to: np.ndarray
    phys_r: np.ndarray
    phys_x: np.ndarray
    phys_p: np.ndarray
    phys_q: np.ndarray
    phys_weight: np.ndarray     # per-edge down-weighting hook, default 1
    hub_residual: np.ndarray    # [n_graphs]


def edge_type_ids(edge_z: np.ndarray) -> np.ndarray:
    """Device slot per edge from the one-hot block of the edge features."""
    block = edge_z[:, _DEV_COLS]
    if not np.all(block.sum(axis=1) == 1.0):
        raise ValueError("edge device one-hot block is not one-hot")
    return block.argmax(axis=1)


def build_batch(items: list[BatchItem],
                feeder_rows: dict[int, int]) -> GraphBatch:
    if not items:
        raise ValueError("empty batch")
    node_parts, feeder_parts, graph_parts = [], [], []
    recv_parts, send_parts, z_parts = [], [], []
    v_parts, obs_parts = [], []
    pf_parts, pt_parts, pr_parts, px_parts, pp_parts, pq_parts, pw_parts = \
        [], [], [], [], [], [], []
    hub_parts = []
    offset = 0
    for g, item in enumerate(items):
        n = item.node_x.shape[0]
        phases = item.node_x[:, _PH_COLS]
        gate = status_gate(item.edge_z, phases[item.edge_from],
                           phases[item.edge_to])
        keep = np.flatnonzero(gate == 1.0)
        # both directions share the device features
        recv_parts.append(item.edge_to[keep] + offset)
        send_parts.append(item.edge_from[keep] + offset)
        recv_parts.append(item.edge_from[keep] + offset)
        send_parts.append(item.edge_to[keep] + offset)
        z_parts.extend((item.edge_z[keep], item.edge_z[keep]))
        node_parts.append(item.node_x)
        feeder_parts.append(item.node_feeder)
        graph_parts.append(np.full(n, g, dtype=np.int64))
        v_parts.append(item.v_true)
        obs_parts.append(item.observed)
        n_phys = len(item.phys_from)
        pf_parts.append(item.phys_from + offset)
        pt_parts.append(item.phys_to + offset)
        pr_parts.append(item.phys_r)
        px_parts.append(item.phys_x)
        pp_parts.append(item.phys_p)
        pq_parts.append(item.phys_q)
        pw_parts.append(np.ones(n_phys))
        hub_parts.append(item.hub_residual)
        offset += n

    node_x = np.concatenate(node_parts, axis=0)
    node_feeder = np.concatenate(feeder_parts)
    graph_of_node = np.concatenate(graph_parts)
    recv = np.concatenate(recv_parts)
    send = np.concatenate(send_parts)
    edge_z = np.concatenate(z_parts, axis=0)
    order = np.argsort(recv, kind="stable")
    recv, send, edge_z = recv[order], send[order], edge_z[order]

    r = edge_z[:, net.EDGE_FEATURE_INDEX["r_pu"]]
    x = edge_z[:, net.EDGE_FEATURE_INDEX["x_pu"]]
    phase_match = np.einsum(
        "ep,ep->e", node_x[recv][:, _PH_COLS], node_x[send][:, _PH_COLS])
    prior = np.stack([
        -np.hypot(r, x),
        phase_match,
        edge_z[:, net.EDGE_FEATURE_INDEX["dev_xfmr_reg"]],
        -edge_z[:, net.EDGE_FEATURE_INDEX["length_km"]],
    ], axis=1)

    non_hub = np.flatnonzero(node_feeder != net.HUB_FEEDER)
    key_graph = graph_of_node[non_hub]
    key_feeder = node_feeder[non_hub]
    perm = np.lexsort((key_feeder, key_graph))
    film_nodes = non_hub[perm]
    sorted_key = np.stack([key_graph[perm], key_feeder[perm]], axis=1)
    if sorted_key.shape[0]:
        new_seg = np.r_[False, np.any(np.diff(sorted_key, axis=0) != 0, axis=1)]
        film_seg = np.cumsum(new_seg).astype(np.int64)
        film_n_seg = int(film_seg[-1]) + 1
        starts = np.flatnonzero(np.r_[True, new_seg[1:]])
        film_seg_graph = sorted_key[starts, 0]
    else:
        film_seg = np.zeros(0, dtype=np.int64)
        film_n_seg = 0
        film_seg_graph = np.zeros(0, dtype=np.int64)

    eta_idx = np.array([feeder_rows.get(int(f), 0) for f in node_feeder],
                       dtype=np.int64)
    eta_known = np.array(
        [1.0 if int(f) in feeder_rows else 0.0 for f in node_feeder])

    return GraphBatch(
        node_x=node_x, recv=recv, send=send, edge_z=edge_z,
        edge_type=edge_type_ids(edge_z), prior=prior,
        n_nodes=node_x.shape[0], n_graphs=len(items),
        graph_of_node=graph_of_node,
        film_nodes=film_nodes, film_seg=film_seg, film_n_seg=film_n_seg,
        film_seg_graph=film_seg_graph,
        eta_idx=eta_idx, eta_known=eta_known[:, None],
        v_true=np.concatenate(v_parts), observed=np.concatenate(obs_parts),
        phys_from=np.concatenate(pf_parts), phys_to=np.concatenate(pt_parts),
        phys_r=np.concatenate(pr_parts), phys_x=np.concatenate(px_parts),
        phys_p=np.concatenate(pp_parts), phys_q=np.concatenate(pq_parts),
        phys_weight=np.concatenate(pw_parts),
        hub_residual=np.array(hub_parts))


# ---------------------------------------------------------------------------
# forward


def edge_messages(params: ModelParams, layer: int, feat: ad.Tensor,
                  type_ids: np.ndarray) -> ad.Tensor:
    weights = [params.tensors[f"layer{layer}.msg{r}"]
               for r in range(N_EDGE_TYPES)]
    return ad.typed_matmul(feat, weights, type_ids)


def attention_logits(params: ModelParams, layer: int, feat: ad.Tensor,
                     prior: np.ndarray) -> ad.Tensor:
    t = params.tensors
    hidden = ad.relu(ad.matmul(feat, t[f"layer{layer}.att_W"]))
    learned = ad.matmul(hidden, t[f"layer{layer}.att_a"])
    structural = ad.matmul(ad.as_tensor(prior), t["beta"])
    return ad.add(learned, structural)


def encoder_layer(params: ModelParams, layer: int, h: ad.Tensor,
                  batch: GraphBatch) -> ad.Tensor:
    t = params.tensors
    n_edges = len(batch.recv)
    feat = ad.concat_cols([ad.gather_rows(h, batch.recv),
                           ad.gather_rows(h, batch.send),
                           ad.as_tensor(batch.edge_z)])
    messages = edge_messages(params, layer, feat, batch.edge_type)
    logits = attention_logits(params, layer, feat, batch.prior)
    alpha = ad.segment_softmax(ad.reshape(logits, (n_edges,)), batch.recv,
                               batch.n_nodes, params.config.temperature)
    weighted = ad.mul(messages, ad.reshape(alpha, (n_edges, 1)))
    agg = ad.segment_sum(weighted, batch.recv, batch.n_nodes)
    hidden = ad.relu(ad.add(ad.matmul(agg, t[f"layer{layer}.phi_W1"]),
                            t[f"layer{layer}.phi_b1"]))
    update = ad.add(ad.matmul(hidden, t[f"layer{layer}.phi_W2"]),
                    t[f"layer{layer}.phi_b2"])
    return ad.layer_norm(ad.add(h, update), t[f"layer{layer}.norm_gain"],
                         t[f"layer{layer}.norm_bias"])


def film_hub(params: ModelParams, h: ad.Tensor, batch: GraphBatch) -> ad.Tensor:
    if batch.film_n_seg == 0:
        raise ad.EngineError("film_hub: no feeder nodes to pool")
    t = params.tensors
    pooled = ad.segment_mean(ad.gather_rows(h, batch.film_nodes),
                             batch.film_seg, batch.film_n_seg)
    context = ad.segment_mean(pooled, batch.film_seg_graph, batch.n_graphs)
    gamma = ad.add(ad.matmul(context, t["film.Wg"]), t["film.bg"])
    beta = ad.add(ad.matmul(context, t["film.Wb"]), t["film.bb"])
    modulated = ad.add(ad.mul(h, ad.gather_rows(gamma, batch.graph_of_node)),
                       ad.gather_rows(beta, batch.graph_of_node))
    gate = ad.gather_rows(t["eta"], batch.eta_idx)
    eta_node = ad.add(ad.mul(gate, batch.eta_known), 1.0 - batch.eta_known)
    return ad.mul(modulated, eta_node)


def decode(params: ModelParams, h: ad.Tensor) -> ad.Tensor:
    t = params.tensors
    hidden = ad.relu(ad.add(ad.matmul(h, t["decoder.W1"]), t["decoder.b1"]))
    out = ad.add(ad.matmul(hidden, t["decoder.W2"]), t["decoder.b2"])
    return ad.reshape(out, (h.shape[0],))


def forward(params: ModelParams, batch: GraphBatch,
            return_embeddings: bool = False):
    """Predicted voltage magnitude per bus-phase node of the batch."""
    t = params.tensors
    h = ad.add(ad.matmul(ad.as_tensor(batch.node_x), t["input.W"]),
               t["input.b"])
    for layer in range(params.config.n_layers):
        h = encoder_layer(params, layer, h, batch)
    modulated = film_hub(params, h, batch)
    v_hat = decode(params, modulated)
    if return_embeddings:
        return v_hat, {"encoder": h, "modulated": modulated}
    return v_hat


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    arrays = {f"tensor/{k}": v.values for k, v in params.tensors.items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "feature_order_hash": net.feature_order_hash(),
        "config": params.config.to_dict(),
        "groups": {k: params.group_of(k) for k in params.tensors},
        "feeder_rows": {str(k): v for k, v in params.feeder_rows.items()},
    }
    arrays["meta_json"] = np.array(json.dumps(meta, sort_keys=True))
    write_npz(path, arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta_json"][()]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"not a model checkpoint: format={meta.get('format')!r}")
        if meta["feature_order_hash"] != net.feature_order_hash():
            raise ValueError("checkpoint feature order does not match this "
                             "build; refusing to load")
        config = ModelConfig.from_dict(meta["config"])
        tensors = {}
        for key in data.files:
            if key.startswith("tensor/"):
                name = key[len("tensor/"):]
                tensors[name] = ad.Tensor(data[key], requires_grad=True,
                                          name=name)
    feeder_rows = {int(k): v for k, v in meta["feeder_rows"].items()}
    params = ModelParams(config, tensors, feeder_rows)
    expected = ModelParams.create(config, list(feeder_rows) or [0], seed=0)
    for name, tensor in expected.tensors.items():
        if name == "eta":
            continue
        if name not in params.tensors:
            raise ValueError(f"checkpoint missing tensor {name}")
        if params.tensors[name].shape != tensor.shape:
            raise ValueError(
                f"checkpoint tensor {name} has shape "
                f"{params.tensors[name].shape}, expected {tensor.shape}")
    return params
