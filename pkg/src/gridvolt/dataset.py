"""Snapshot datasets: solver output flattened to arrays and stored as npz.

Datasets hold fully observed features (every node carries its solved
voltage); observability masks are applied at training/evaluation time by
re-zeroing the two measurement columns. This keeps one stored copy per
scenario valid for every observability level.

The npz writer is deterministic: sorted member order, fixed zip metadata
timestamps, no pickling. Equal inputs produce byte-identical files, which
the run manifest relies on for output hashing.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np
from numpy.lib import format as npformat

from . import network as net
from . import simulation as sim
from .seeding import rng as _rng

_FORMAT = "snapshot-dataset/v1"


@dataclass
class SnapshotView:
    """Arrays of one snapshot; feature rows follow NODE_FEATURE_ORDER."""

    index: int
    timestamp: float
    node_features: np.ndarray   # [N, 17], fully observed
    v_true: np.ndarray          # [N]
    node_feeder: np.ndarray     # [N] effective feeder id (ties applied)
    edge_from: np.ndarray       # [E]
    edge_to: np.ndarray         # [E]
    edge_features: np.ndarray   # [E, 13]
    edge_p: np.ndarray          # [E] sending-end active flow
    edge_q: np.ndarray          # [E]
    edge_phys: np.ndarray       # [E] bool, physics-loss membership
    head_s: dict[int, complex]
    s_subxfmr: complex
    s_aux: complex


class SnapshotDataset:
    """In-memory dataset over one substation graph.

    Static topology (endpoints, node identity) is shared across snapshots;
    per-snapshot arrays carry features, targets, flows and switch states.
    """

    def __init__(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.meta = meta
        self.arrays = arrays
        required = ("node_features", "v_true", "node_feeder", "edge_from",
                    "edge_to", "edge_features", "edge_p", "edge_q",
                    "edge_phys", "timestamps", "feeder_ids", "head_p",
                    "head_q", "s_subxfmr_re", "s_subxfmr_im", "s_aux_re",
                    "s_aux_im", "bus_id", "phase_idx", "bus_type_idx",
                    "kv_base")
        missing = [k for k in required if k not in arrays]
        if missing:
            raise ValueError(f"dataset arrays missing {missing}")
        if meta.get("feature_order_hash") != net.feature_order_hash():
            raise ValueError(
                "dataset was written with a different feature order "
                f"({meta.get('feature_order_hash')}); refusing to load")

    @property
    def n_snapshots(self) -> int:
        return self.arrays["node_features"].shape[0]

    @property
    def n_nodes(self) -> int:
        return self.arrays["node_features"].shape[1]

    @property
    def n_edges(self) -> int:
        return self.arrays["edge_from"].shape[0]

    @property
    def feeder_ids(self) -> np.ndarray:
        return self.arrays["feeder_ids"]

    def snapshot(self, i: int) -> SnapshotView:
        if not 0 <= i < self.n_snapshots:
            raise IndexError(f"snapshot {i} out of range 0..{self.n_snapshots - 1}")
        a = self.arrays
        head_s = {int(f): complex(a["head_p"][i, k], a["head_q"][i, k])
                  for k, f in enumerate(a["feeder_ids"])}
        return SnapshotView(
            index=i, timestamp=float(a["timestamps"][i]),
            node_features=a["node_features"][i], v_true=a["v_true"][i],
            node_feeder=a["node_feeder"][i],
            edge_from=a["edge_from"], edge_to=a["edge_to"],
            edge_features=a["edge_features"][i],
            edge_p=a["edge_p"][i], edge_q=a["edge_q"][i],
            edge_phys=a["edge_phys"][i], head_s=head_s,
            s_subxfmr=complex(a["s_subxfmr_re"][i], a["s_subxfmr_im"][i]),
            s_aux=complex(a["s_aux_re"][i], a["s_aux_im"][i]))

    def bus_phases(self) -> list[net.BusPhase]:
        """Static node identity; feeder ids are the spec's (pre-tie)."""
        a = self.arrays
        return [
            net.BusPhase(
                id=i, bus_id=int(a["bus_id"][i]),
                phase=net.PHASES[int(a["phase_idx"][i])],
                kv_base=float(a["kv_base"][i]),
                bus_type=net.BUS_TYPES[int(a["bus_type_idx"][i])],
                feeder_id=int(a["node_feeder"][0, i]))
            for i in range(self.n_nodes)
        ]

    def subset(self, n_first: int) -> "SnapshotDataset":
        """First n_first snapshots as a new dataset (array views)."""
        if not 1 <= n_first <= self.n_snapshots:
            raise ValueError(
                f"subset size {n_first} outside 1..{self.n_snapshots}")
        per_t = ("node_features", "v_true", "node_feeder", "edge_features",
                 "edge_p", "edge_q", "edge_phys", "timestamps", "head_p",
                 "head_q", "s_subxfmr_re", "s_subxfmr_im", "s_aux_re",
                 "s_aux_im")
        arrays = {k: (v[:n_first] if k in per_t else v)
                  for k, v in self.arrays.items()}
        meta = dict(self.meta)
        meta["subset_of"] = self.meta.get("n_snapshots", self.n_snapshots)
        meta["n_snapshots"] = n_first
        return SnapshotDataset(meta, arrays)


def build_dataset(spec: sim.SubstationSpec,
                  scenario: sim.ScenarioConfig) -> SnapshotDataset:
    """Run the scenario and flatten every snapshot into dataset arrays."""
    states = sim.run_timeseries(spec, scenario)
    return dataset_from_states(spec, scenario, states)


def dataset_from_states(spec: sim.SubstationSpec,
                        scenario: sim.ScenarioConfig,
                        states: list[net.SolvedState]) -> SnapshotDataset:
    if not states:
        raise ValueError("no snapshots to store")
    n = len(states[0].bus_phases)
    n_edges = len(states[0].edges)
    t_total = len(states)
    full = net.ObservabilityMask(observed=np.ones(n, dtype=bool),
                                 p_obs=100, seed=0)

    node_features = np.empty((t_total, n, net.N_NODE_FEATURES))
    v_true = np.empty((t_total, n))
    node_feeder = np.empty((t_total, n), dtype=np.int64)
    edge_features = np.empty((t_total, n_edges, net.N_EDGE_FEATURES))
    edge_p = np.empty((t_total, n_edges))
    edge_q = np.empty((t_total, n_edges))
    edge_phys = np.empty((t_total, n_edges), dtype=bool)
    timestamps = np.empty(t_total)
    fids = sorted(f.feeder_id for f in spec.feeders)
    head_p = np.empty((t_total, len(fids)))
    head_q = np.empty((t_total, len(fids)))
    s_sub = np.empty(t_total, dtype=complex)
    s_aux = np.empty(t_total, dtype=complex)

    for t, state in enumerate(states):
        snap = net.build_features(state, full)
        node_features[t] = snap.node_feature_matrix()
        v_true[t] = snap.v_true()
        node_feeder[t] = [bp.feeder_id for bp, _, _ in snap.nodes]
        for e, rec in enumerate(snap.edges):
            edge_features[t, e] = rec.features
            edge_p[t, e] = rec.p_flow_pu
            edge_q[t, e] = rec.q_flow_pu
            edge_phys[t, e] = rec.in_physics_set
        timestamps[t] = state.timestamp
        for k, f in enumerate(fids):
            head_p[t, k] = state.feeder_heads[f].real
            head_q[t, k] = state.feeder_heads[f].imag
        s_sub[t] = state.s_subxfmr
        s_aux[t] = state.s_aux

    _blur_injection_features(node_features, node_feeder[0], spec, scenario)

    first = states[0]
    edge_from = np.array([e.from_id for e in first.edges], dtype=np.int64)
    edge_to = np.array([e.to_id for e in first.edges], dtype=np.int64)
    bus_id = np.array([bp.bus_id for bp in first.bus_phases], dtype=np.int64)
    phase_idx = np.array([net.PHASES.index(bp.phase) for bp in first.bus_phases],
                         dtype=np.int64)
    bus_type_idx = np.array([net.BUS_TYPES.index(bp.bus_type)
                             for bp in first.bus_phases], dtype=np.int64)
    kv_base = np.array([bp.kv_base for bp in first.bus_phases])

    meta = {
        "format": _FORMAT,
        "feature_order_hash": net.feature_order_hash(),
        "substation": spec.name,
        "spec": sim.spec_to_dict(spec),
        "scenarios": [scenario_to_dict(scenario)],
        "n_snapshots": t_total,
    }
    arrays = dict(
        node_features=node_features, v_true=v_true, node_feeder=node_feeder,
        edge_from=edge_from, edge_to=edge_to, edge_features=edge_features,
        edge_p=edge_p, edge_q=edge_q, edge_phys=edge_phys,
        timestamps=timestamps,
        feeder_ids=np.array(fids, dtype=np.int64),
        head_p=head_p, head_q=head_q,
        s_subxfmr_re=s_sub.real.copy(), s_subxfmr_im=s_sub.imag.copy(),
        s_aux_re=s_aux.real.copy(), s_aux_im=s_aux.imag.copy(),
        bus_id=bus_id, phase_idx=phase_idx, bus_type_idx=bus_type_idx,
        kv_base=kv_base,
    )
    return SnapshotDataset(meta, arrays)


def _blur_injection_features(node_features: np.ndarray, fid: np.ndarray,
                             spec: sim.SubstationSpec,
                             scenario: sim.ScenarioConfig) -> None:
    """Degrade the injection feature column to pseudo-measurement quality.

    Multiplicative error, one component shared per feeder per snapshot plus
    one independent per node, clipped to keep signs. Only the feature column
    changes: labels, edge flows, and head totals stay solver-exact, so a
    voltage sensor carries information the injections no longer determine.
    """
    if scenario.pseudo_noise_common == 0 and scenario.pseudo_noise_local == 0:
        return
    gen = _rng(spec.seed, "pseudo-measurement", scenario.der_penetration,
               scenario.horizon_minutes, scenario.tie_close_step,
               *scenario.tie_closures)
    col = net.NODE_FEATURE_INDEX["p_injection_pu"]
    feeders = np.unique(fid)
    n = node_features.shape[1]
    for t in range(node_features.shape[0]):
        factor = np.ones(n)
        for f in feeders:
            factor[fid == f] *= 1.0 + gen.normal(
                0.0, scenario.pseudo_noise_common)
        factor *= 1.0 + gen.normal(0.0, scenario.pseudo_noise_local, size=n)
        node_features[t, :, col] *= np.clip(factor, 0.3, 1.7)


def scenario_to_dict(scenario: sim.ScenarioConfig) -> dict:
    return {
        "horizon_minutes": scenario.horizon_minutes,
        "der_penetration": scenario.der_penetration,
        "tie_closures": list(scenario.tie_closures),
        "tie_close_step": scenario.tie_close_step,
        "pseudo_noise_common": scenario.pseudo_noise_common,
        "pseudo_noise_local": scenario.pseudo_noise_local,
    }


def concatenate(datasets: list[SnapshotDataset]) -> SnapshotDataset:
    """Join scenario runs over the same substation graph along time."""
    if not datasets:
        raise ValueError("nothing to concatenate")
    base = datasets[0]
    for other in datasets[1:]:
        if other.meta["substation"] != base.meta["substation"]:
            raise ValueError("datasets come from different substations")
        if not np.array_equal(other.arrays["edge_from"], base.arrays["edge_from"]):
            raise ValueError("edge topology differs between datasets")
    per_t = ("node_features", "v_true", "node_feeder", "edge_features",
             "edge_p", "edge_q", "edge_phys", "timestamps", "head_p",
             "head_q", "s_subxfmr_re", "s_subxfmr_im", "s_aux_re", "s_aux_im")
    arrays = dict(base.arrays)
    for k in per_t:
        arrays[k] = np.concatenate([d.arrays[k] for d in datasets], axis=0)
    meta = dict(base.meta)
    meta["scenarios"] = [s for d in datasets for s in d.meta["scenarios"]]
    meta["n_snapshots"] = int(arrays["v_true"].shape[0])
    return SnapshotDataset(meta, arrays)


# ---------------------------------------------------------------------------
# deterministic npz io

def write_npz(path, arrays: dict[str, np.ndarray], compress: bool = True) -> None:
    """npz writer with fixed zip metadata so equal data gives equal bytes."""
    method = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(path, "w", method) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            npformat.write_array(buf, np.asarray(arrays[name]),
                                 allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = method
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def save_dataset(ds: SnapshotDataset, path) -> None:
    arrays = dict(ds.arrays)
    arrays["meta_json"] = np.array(json.dumps(ds.meta, sort_keys=True))
    write_npz(path, arrays)


def load_dataset(path) -> SnapshotDataset:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != "meta_json"}
        meta = json.loads(str(data["meta_json"][()]))
    if meta.get("format") != _FORMAT:
        raise ValueError(f"not a snapshot dataset: format={meta.get('format')!r}")
    return SnapshotDataset(meta, arrays)
