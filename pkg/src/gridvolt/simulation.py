"""Synthetic substations and a backward-forward sweep power-flow solver.

A substation is a hub bus feeding 2..6 radial MV feeders. Every MV backbone
bus hosts at least one single-phase distribution transformer whose LV side
carries a short string of load buses, so bus types stay meaningful. One
voltage regulator sits mid-backbone per feeder, and normally-open tie
switches join pairs of feeders.

The solver works per phase in per-unit (system base 1 MVA, voltage base per
level). Each phase of the network must form a tree rooted at the hub; when a
tie switch closes, the sectionalizer upstream of the transfer bus opens, so
the merged topology stays radial and the same sweep applies. Regulators are
ideal-ratio devices in series with a small impedance: with ratio a and
branch current I, the downstream voltage is a*V_up - z*I and the upstream
side sees current a*I, which conserves complex power up to the z loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import network as net
from .seeding import derive_seed, rng as _rng

S_BASE_MVA = 1.0
TIMESTEP_MINUTES = 15
REG_STEP = 0.00625           # per-unit ratio change per regulator tap step
REG_MAX_TAP = 16
REG_DEADBAND = 0.01          # regulate toward 1.0 +/- this band
SOLVER_TOL = 1e-12           # max |dV| between sweeps; well inside the 1e-8 contract
SOLVER_MAX_ITER = 100

DER_PENETRATIONS = (0, 20, 30, 40)
SIZE_CLASSES = ("tiny", "small", "medium")

# bus-phase targets per feeder: tiny 30, small 80, medium 200 exactly
# (3 head phases + 3*n_mv + n_chains + lv_total). Segment lengths shrink
# with size so end-of-feeder voltage stays inside a credible band.
_SIZE_PARAMS = {
    "tiny": dict(n_mv=4, n_chains=5, lv_total=10, seg_km=(1.2, 3.2)),
    "small": dict(n_mv=12, n_chains=13, lv_total=28, seg_km=(0.8, 2.0)),
    "medium": dict(n_mv=30, n_chains=33, lv_total=74, seg_km=(0.5, 1.4)),
}

_MV_KV = 7.2      # line-to-neutral kV of the distribution level
_LV_KV = 0.12


class PowerFlowError(Exception):
    """Solver failure; carries the last voltage-update residual if known."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


@dataclass
class ProfileSpec:
    """Parameters of one seeded 15-minute profile (daily sinusoid + noise)."""

    kind: str                 # "load" or "pv"
    peak_pu: float            # peak active power (load) or unit capacity (pv)
    peak_hour: float
    pf: float = 1.0           # lagging power factor; pv is unity
    noise_seed: int = 0
    noise_sigma: float = 0.05


@dataclass
class LoadSpec:
    bus_id: int
    phase: str
    profile: ProfileSpec


@dataclass
class DerSpec:
    bus_id: int
    phase: str
    profile: ProfileSpec


@dataclass
class CapacitorSpec:
    bus_id: int
    q_pu: float               # total three-phase reactive output when on
    on: bool = True


@dataclass
class BusSpec:
    bus_id: int
    kv_base: float
    bus_type: str
    phases: tuple[str, ...]
    feeder_id: int
    serving_rating_pu: float  # transformer capacity this bus is served through


@dataclass
class DeviceSpec:
    uid: int
    from_bus: int
    to_bus: int
    device: str               # network.DEVICE_KINDS
    phases: tuple[str, ...]
    r_pu: float
    x_pu: float
    length_km: float
    rating_pu: float
    normally_closed: bool = True
    is_tie: bool = False
    feeder_id: int = net.HUB_FEEDER


@dataclass
class TieSpec:
    """Normally-open switch between two feeders plus its transfer point.

    Closing the tie opens ``sectionalizer_uid`` (the switch just upstream of
    ``transfer_bus``), which hands the subtree at the transfer bus over to
    the other feeder while keeping every phase graph radial.
    """

    device_uid: int
    from_feeder: int
    to_feeder: int
    transfer_bus: int
    sectionalizer_uid: int


@dataclass
class FeederSpec:
    feeder_id: int
    head_bus: int
    buses: list[BusSpec]
    devices: list[DeviceSpec]
    loads: list[LoadSpec]
    ders: list[DerSpec]
    capacitors: list[CapacitorSpec]


@dataclass
class SubstationSpec:
    seed: int
    size_class: str
    hub_bus: BusSpec
    hub_kv: float
    feeders: list[FeederSpec]
    hub_links: list[DeviceSpec]
    ties: list[TieSpec]
    tie_devices: list[DeviceSpec]
    xfmr_rating_pu: float
    feeder_rating_pu: float
    aux_load: complex
    ltc_setpoint: float

    @property
    def name(self) -> str:
        return f"s{self.seed}-{self.size_class}-f{len(self.feeders)}"

    def all_buses(self) -> list[BusSpec]:
        out = [self.hub_bus]
        for f in self.feeders:
            out.extend(f.buses)
        return out

    def all_devices(self) -> list[DeviceSpec]:
        out = list(self.hub_links)
        for f in self.feeders:
            out.extend(f.devices)
        out.extend(self.tie_devices)
        return out


@dataclass
class ScenarioConfig:
    """What varies between runs over one substation spec."""

    horizon_minutes: int = 1440
    der_penetration: int = 0
    tie_closures: tuple[int, ...] = ()   # indices into SubstationSpec.ties
    tie_close_step: int = 0
    # Injection features are pseudo-measurements (forecasts), not metered
    # values: each snapshot's feature column gets a multiplicative error with
    # a component shared across a feeder and an independent local component.
    # Labels, flows, and the physics targets stay solver-exact.
    pseudo_noise_common: float = 0.06
    pseudo_noise_local: float = 0.12

    def __post_init__(self):
        if self.der_penetration not in DER_PENETRATIONS:
            raise ValueError(
                f"der_penetration must be one of {DER_PENETRATIONS}, "
                f"got {self.der_penetration}")
        if self.horizon_minutes < TIMESTEP_MINUTES:
            raise ValueError("horizon shorter than one timestep")
        if min(self.pseudo_noise_common, self.pseudo_noise_local) < 0:
            raise ValueError("pseudo-measurement noise must be non-negative")


# ---------------------------------------------------------------------------
# serialization (key-value tree on disk)

def _profile_to_dict(p: ProfileSpec) -> dict:
    return asdict(p)


def spec_to_dict(spec: SubstationSpec) -> dict:
    def dev(d: DeviceSpec) -> dict:
        out = asdict(d)
        out["phases"] = list(d.phases)
        return out

    def bus(b: BusSpec) -> dict:
        out = asdict(b)
        out["phases"] = list(b.phases)
        return out

    return {
        "format": "substation-spec/v1",
        "seed": spec.seed,
        "size_class": spec.size_class,
        "hub_kv": spec.hub_kv,
        "hub_bus": bus(spec.hub_bus),
        "xfmr_rating_pu": spec.xfmr_rating_pu,
        "feeder_rating_pu": spec.feeder_rating_pu,
        "aux_load": [spec.aux_load.real, spec.aux_load.imag],
        "ltc_setpoint": spec.ltc_setpoint,
        "hub_links": [dev(d) for d in spec.hub_links],
        "tie_devices": [dev(d) for d in spec.tie_devices],
        "ties": [asdict(t) for t in spec.ties],
        "feeders": [
            {
                "feeder_id": f.feeder_id,
                "head_bus": f.head_bus,
                "buses": [bus(b) for b in f.buses],
                "devices": [dev(d) for d in f.devices],
                "loads": [{"bus_id": l.bus_id, "phase": l.phase,
                           "profile": _profile_to_dict(l.profile)} for l in f.loads],
                "ders": [{"bus_id": d.bus_id, "phase": d.phase,
                          "profile": _profile_to_dict(d.profile)} for d in f.ders],
                "capacitors": [asdict(c) for c in f.capacitors],
            }
            for f in spec.feeders
        ],
    }


def spec_from_dict(data: dict) -> SubstationSpec:
    if data.get("format") != "substation-spec/v1":
        raise ValueError(f"not a substation spec file: format={data.get('format')!r}")

    def bus(d: dict) -> BusSpec:
        d = dict(d)
        d["phases"] = tuple(d["phases"])
        return BusSpec(**d)

    def dev(d: dict) -> DeviceSpec:
        d = dict(d)
        d["phases"] = tuple(d["phases"])
        return DeviceSpec(**d)

    feeders = []
    for f in data["feeders"]:
        feeders.append(FeederSpec(
            feeder_id=f["feeder_id"],
            head_bus=f["head_bus"],
            buses=[bus(b) for b in f["buses"]],
            devices=[dev(d) for d in f["devices"]],
            loads=[LoadSpec(l["bus_id"], l["phase"], ProfileSpec(**l["profile"]))
                   for l in f["loads"]],
            ders=[DerSpec(d["bus_id"], d["phase"], ProfileSpec(**d["profile"]))
                  for d in f["ders"]],
            capacitors=[CapacitorSpec(**c) for c in f["capacitors"]],
        ))
    return SubstationSpec(
        seed=data["seed"],
        size_class=data["size_class"],
        hub_bus=bus(data["hub_bus"]),
        hub_kv=data["hub_kv"],
        feeders=feeders,
        hub_links=[dev(d) for d in data["hub_links"]],
        ties=[TieSpec(**t) for t in data["ties"]],
        tie_devices=[dev(d) for d in data["tie_devices"]],
        xfmr_rating_pu=data["xfmr_rating_pu"],
        feeder_rating_pu=data["feeder_rating_pu"],
        aux_load=complex(data["aux_load"][0], data["aux_load"][1]),
        ltc_setpoint=data["ltc_setpoint"],
    )


def save_spec(spec: SubstationSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2, sort_keys=True))


def load_spec(path: str | Path) -> SubstationSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# substation synthesis

def generate_substation(spec_seed: int, size_class: str,
                        n_feeders: int = 3) -> SubstationSpec:
    """Build a seeded multi-feeder substation of the requested size class."""
    if size_class not in _SIZE_PARAMS:
        raise ValueError(f"size_class must be one of {SIZE_CLASSES}, got {size_class!r}")
    if not 2 <= n_feeders <= 6:
        raise ValueError(f"n_feeders must be in 2..6, got {n_feeders}")
    params = _SIZE_PARAMS[size_class]
    gen = _rng(spec_seed, "substation", size_class, n_feeders)

    xfmr_rating = 2.0 * n_feeders
    feeder_rating = 2.0
    ltc_setpoint = float(gen.uniform(1.0, 1.03))
    aux_load = complex(gen.uniform(0.005, 0.02), gen.uniform(0.002, 0.008))

    hub = BusSpec(bus_id=0, kv_base=_MV_KV, bus_type="substation_hub",
                  phases=net.PHASES, feeder_id=net.HUB_FEEDER,
                  serving_rating_pu=xfmr_rating)

    next_bus = 1
    next_uid = 0
    feeders: list[FeederSpec] = []
    hub_links: list[DeviceSpec] = []
    feeder_base = (spec_seed % 10**6) * 8

    for k in range(n_feeders):
        fid = feeder_base + k
        f, next_bus, next_uid = _generate_feeder(
            gen, fid, k, next_bus, next_uid, params, feeder_rating)
        feeders.append(f)
        hub_links.append(DeviceSpec(
            uid=next_uid, from_bus=0, to_bus=f.head_bus, device="switch",
            phases=net.PHASES, r_pu=1e-4, x_pu=1e-4, length_km=0.0,
            rating_pu=feeder_rating, normally_closed=True, feeder_id=fid))
        next_uid += 1

    ties: list[TieSpec] = []
    tie_devices: list[DeviceSpec] = []
    for k in range(max(1, n_feeders - 1)):
        fa, fb = feeders[k % n_feeders], feeders[(k + 1) % n_feeders]
        tie, dev_spec, next_uid = _make_tie(gen, fa, fb, next_uid)
        ties.append(tie)
        tie_devices.append(dev_spec)

    return SubstationSpec(
        seed=spec_seed, size_class=size_class, hub_bus=hub, hub_kv=_MV_KV,
        feeders=feeders, hub_links=hub_links, ties=ties, tie_devices=tie_devices,
        xfmr_rating_pu=xfmr_rating, feeder_rating_pu=feeder_rating,
        aux_load=aux_load, ltc_setpoint=ltc_setpoint,
    )


def _generate_feeder(gen, fid: int, k: int, next_bus: int, next_uid: int,
                     params: dict, feeder_rating: float):
    buses: list[BusSpec] = []
    devices: list[DeviceSpec] = []
    loads: list[LoadSpec] = []
    ders: list[DerSpec] = []
    caps: list[CapacitorSpec] = []

    head = BusSpec(next_bus, _MV_KV, "feeder_head", net.PHASES, fid, feeder_rating)
    buses.append(head)
    next_bus += 1

    # MV backbone tree: each new bus attaches to the previous one (trunk) or
    # to a random earlier bus (branch).
    mv_ids = [head.bus_id]
    backbone_edges: list[DeviceSpec] = []
    for i in range(params["n_mv"]):
        parent = mv_ids[-1] if (i == 0 or gen.uniform() < 0.6) else \
            int(gen.choice(mv_ids))
        b = BusSpec(next_bus, _MV_KV, "dt_high", net.PHASES, fid, feeder_rating)
        buses.append(b)
        mv_ids.append(b.bus_id)
        next_bus += 1
        length = float(gen.uniform(*params["seg_km"]))
        if gen.uniform() < 0.3:
            dev_kind, r_km, x_km = "cable", gen.uniform(0.36, 0.6), gen.uniform(0.16, 0.26)
        else:
            dev_kind, r_km, x_km = "line", gen.uniform(0.68, 1.12), gen.uniform(0.6, 0.9)
        z_base = _MV_KV ** 2 / S_BASE_MVA
        d = DeviceSpec(next_uid, parent, b.bus_id, dev_kind, net.PHASES,
                       r_pu=length * r_km / z_base, x_pu=length * x_km / z_base,
                       length_km=length, rating_pu=1.2 * feeder_rating,
                       feeder_id=fid)
        devices.append(d)
        backbone_edges.append(d)
        next_uid += 1

    # mid-backbone voltage regulator replaces one line segment
    reg_idx = len(backbone_edges) // 2
    reg = backbone_edges[reg_idx]
    reg.device = "regulator"
    reg.r_pu, reg.x_pu, reg.length_km = 1e-3, 2e-3, 0.0

    # one normally-closed sectionalizing switch for texture
    sw_choices = [d for d in backbone_edges if d.device in ("line", "cable")]
    if sw_choices:
        sw = sw_choices[int(gen.integers(len(sw_choices)))]
        sw.device, sw.r_pu, sw.x_pu, sw.length_km = "switch", 1e-4, 1e-4, 0.0

    # DT chains: every MV bus hosts at least one
    hosts = [b for b in buses if b.bus_type == "dt_high"]
    chain_hosts = list(hosts)
    while len(chain_hosts) < params["n_chains"]:
        chain_hosts.append(hosts[int(gen.integers(len(hosts)))])
    lv_counts = np.ones(len(chain_hosts), dtype=int)
    extra = params["lv_total"] - len(chain_hosts)
    while extra > 0:
        i = int(gen.integers(len(chain_hosts)))
        if lv_counts[i] < 4:
            lv_counts[i] += 1
            extra -= 1
    z_base_lv = _LV_KV ** 2 / S_BASE_MVA
    lv_buses_all: list[BusSpec] = []
    for c, host in enumerate(chain_hosts):
        n_lv = int(lv_counts[c])
        phase = net.PHASES[c % 3]
        chain_peak = 0.0
        chain_loads: list[LoadSpec] = []
        dt_low = BusSpec(next_bus, _LV_KV, "dt_low", (phase,), fid, 0.0)
        buses.append(dt_low)
        chain_members = [dt_low]
        next_bus += 1
        prev = dt_low.bus_id
        for _ in range(n_lv):
            lv = BusSpec(next_bus, _LV_KV, "lv_node", (phase,), fid, 0.0)
            buses.append(lv)
            lv_buses_all.append(lv)
            chain_members.append(lv)
            next_bus += 1
            length = float(gen.uniform(0.01, 0.03))
            r_km, x_km = gen.uniform(0.2, 0.5), gen.uniform(0.08, 0.16)
            devices.append(DeviceSpec(
                next_uid, prev, lv.bus_id, "line", (phase,),
                r_pu=length * r_km / z_base_lv, x_pu=length * x_km / z_base_lv,
                length_km=length, rating_pu=0.1, feeder_id=fid))
            next_uid += 1
            prev = lv.bus_id
            peak = float(gen.uniform(0.01, 0.036))  # 10..36 kW service cluster
            chain_peak += peak
            chain_loads.append(LoadSpec(lv.bus_id, phase, ProfileSpec(
                kind="load", peak_pu=peak,
                peak_hour=float(gen.uniform(16.5, 19.5)),
                pf=float(gen.uniform(0.92, 0.98)),
                noise_seed=int(gen.integers(2**31)),
                noise_sigma=0.35)))
        loads.extend(chain_loads)
        # transformer sized above the chain peak
        options = np.array([0.025, 0.05, 0.075, 0.1, 0.167])
        rating = float(options[np.searchsorted(options, 1.25 * chain_peak,
                                               side="left").clip(0, 4)])
        for b in chain_members:
            b.serving_rating_pu = rating
        zb = float(gen.uniform(0.7, 1.05))
        devices.append(DeviceSpec(
            next_uid, host.bus_id, dt_low.bus_id, "transformer", (phase,),
            r_pu=0.38 * zb, x_pu=0.92 * zb, length_km=0.0, rating_pu=rating,
            feeder_id=fid))
        next_uid += 1

    # rooftop PV on roughly half of the LV buses
    n_der = len(lv_buses_all) // 2
    der_picks = gen.choice(len(lv_buses_all), size=n_der, replace=False)
    load_by_bus = {l.bus_id: l for l in loads}
    for idx in np.sort(der_picks):
        b = lv_buses_all[int(idx)]
        base_load = load_by_bus[b.bus_id]
        ders.append(DerSpec(b.bus_id, base_load.phase, ProfileSpec(
            kind="pv", peak_pu=2.5 * base_load.profile.peak_pu,
            peak_hour=float(gen.uniform(12.5, 13.5)), pf=1.0,
            noise_seed=int(gen.integers(2**31)), noise_sigma=0.3)))

    # one switched capacitor bank mid-feeder
    cap_bus = mv_ids[len(mv_ids) // 2]
    caps.append(CapacitorSpec(bus_id=cap_bus, q_pu=float(gen.uniform(0.06, 0.12)),
                              on=True))

    return FeederSpec(fid, head.bus_id, buses, devices, loads, ders, caps), \
        next_bus, next_uid


def _make_tie(gen, fa: FeederSpec, fb: FeederSpec, next_uid: int):
    """Tie the far ends of two feeders; ensure a sectionalizer above the
    transfer bus on the receiving feeder."""
    mv_a = [b for b in fa.buses if b.bus_type == "dt_high"]
    end_a = mv_a[-1].bus_id

    reg_to = {d.to_bus for d in fb.devices if d.device == "regulator"}
    candidates = [b for b in fb.buses
                  if b.bus_type == "dt_high" and b.bus_id not in reg_to]
    transfer = candidates[-1]
    upstream = next(d for d in fb.devices
                    if d.to_bus == transfer.bus_id and d.device != "transformer")
    if upstream.device != "switch":
        upstream.device, upstream.r_pu, upstream.x_pu, upstream.length_km = \
            "switch", 1e-4, 1e-4, 0.0
    tie_dev = DeviceSpec(next_uid, end_a, transfer.bus_id, "switch", net.PHASES,
                         r_pu=1e-4, x_pu=1e-4, length_km=0.0, rating_pu=1.0,
                         normally_closed=False, is_tie=True)
    tie = TieSpec(device_uid=next_uid, from_feeder=fa.feeder_id,
                  to_feeder=fb.feeder_id, transfer_bus=transfer.bus_id,
                  sectionalizer_uid=upstream.uid)
    return tie, tie_dev, next_uid + 1


# ---------------------------------------------------------------------------
# graph expansion

@dataclass
class GraphIndex:
    """Bus-phase expansion of a SubstationSpec."""

    bus_phases: list[net.BusPhase]
    node_of: dict[tuple[int, str], int]
    devices: list[DeviceSpec]
    device_by_uid: dict[int, DeviceSpec]
    edge_device: list[int]       # device uid per device-phase edge
    edge_phase: list[str]
    edge_from: np.ndarray
    edge_to: np.ndarray
    serving_rating: np.ndarray
    hub_node_ids: list[int]

    @property
    def n_nodes(self) -> int:
        return len(self.bus_phases)


def build_graph(spec: SubstationSpec) -> GraphIndex:
    bus_phases: list[net.BusPhase] = []
    node_of: dict[tuple[int, str], int] = {}
    serving: list[float] = []
    for b in spec.all_buses():
        for ph in b.phases:
            nid = len(bus_phases)
            bus_phases.append(net.BusPhase(
                id=nid, bus_id=b.bus_id, phase=ph, kv_base=b.kv_base,
                bus_type=b.bus_type, feeder_id=b.feeder_id))
            node_of[(b.bus_id, ph)] = nid
            serving.append(b.serving_rating_pu)

    devices = spec.all_devices()
    edge_device: list[int] = []
    edge_phase: list[str] = []
    edge_from: list[int] = []
    edge_to: list[int] = []
    for d in devices:
        for ph in d.phases:
            a = node_of.get((d.from_bus, ph))
            b = node_of.get((d.to_bus, ph))
            if a is None or b is None:
                continue
            edge_device.append(d.uid)
            edge_phase.append(ph)
            edge_from.append(a)
            edge_to.append(b)

    hub_nodes = [bp.id for bp in bus_phases if bp.bus_type == "substation_hub"]
    return GraphIndex(
        bus_phases=bus_phases, node_of=node_of, devices=devices,
        device_by_uid={d.uid: d for d in devices},
        edge_device=edge_device, edge_phase=edge_phase,
        edge_from=np.array(edge_from, dtype=int), edge_to=np.array(edge_to, dtype=int),
        serving_rating=np.array(serving), hub_node_ids=hub_nodes,
    )


# ---------------------------------------------------------------------------
# power flow

@dataclass
class Controls:
    """Per-timestep device state: regulator taps and switch overrides."""

    taps: dict[tuple[int, str], int] = field(default_factory=dict)
    closed_override: dict[int, bool] = field(default_factory=dict)

    def status(self, dev: DeviceSpec) -> int:
        closed = self.closed_override.get(dev.uid, dev.normally_closed)
        return 1 if closed else 0

    def tap_steps(self, dev: DeviceSpec, phase: str) -> int:
        return self.taps.get((dev.uid, phase), 0)


def solve_powerflow(spec: SubstationSpec, graph: GraphIndex,
                    s_injection: np.ndarray, controls: Controls,
                    timestamp: float = 0.0,
                    tol: float = SOLVER_TOL,
                    max_iter: int = SOLVER_MAX_ITER) -> net.SolvedState:
    """Backward-forward sweep over every phase tree of the substation.

    ``s_injection`` is complex net consumption per bus-phase node (load minus
    generation; capacitors contribute negative reactive consumption). The hub
    nodes are the slack at the LTC setpoint.
    """
    n = graph.n_nodes
    n_edges = len(graph.edge_device)
    status = np.zeros(n_edges, dtype=int)
    ratio = np.ones(n_edges)
    z = np.zeros(n_edges, dtype=complex)
    tap_norm_edge = np.zeros(n_edges)
    for e in range(n_edges):
        dev = graph.device_by_uid[graph.edge_device[e]]
        status[e] = controls.status(dev)
        z[e] = complex(dev.r_pu, dev.x_pu)
        if dev.device == "regulator":
            steps = controls.tap_steps(dev, graph.edge_phase[e])
            ratio[e] = 1.0 + REG_STEP * steps
            tap_norm_edge[e] = steps / REG_MAX_TAP

    # per-phase trees rooted at the hub
    parent_edge = np.full(n, -1, dtype=int)       # edge index into edge arrays
    parent_node = np.full(n, -1, dtype=int)
    order: list[int] = []                          # BFS order, roots first
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    closed_edges = np.flatnonzero(status == 1)
    for e in closed_edges:
        a, b = graph.edge_from[e], graph.edge_to[e]
        adj[a].append((b, e))
        adj[b].append((a, e))
    seen = np.zeros(n, dtype=bool)
    for root in graph.hub_node_ids:
        seen[root] = True
        order.append(root)
    qi = 0
    while qi < len(order):
        u = order[qi]
        qi += 1
        for v, e in adj[u]:
            if seen[v]:
                continue
            seen[v] = True
            parent_edge[v] = e
            parent_node[v] = u
            order.append(v)
    if not np.all(seen):
        bad = graph.bus_phases[int(np.flatnonzero(~seen)[0])]
        raise PowerFlowError(
            f"bus-phase {bad.id} (bus {bad.bus_id} phase {bad.phase}) is "
            f"islanded from the substation hub")
    if len(closed_edges) != n - len(graph.hub_node_ids):
        raise PowerFlowError(
            f"closed-edge count {len(closed_edges)} does not form a radial "
            f"forest over {n} nodes ({len(graph.hub_node_ids)} roots); "
            f"a loop is present")

    # orient each tree edge parent -> child
    child_of_edge = np.full(n_edges, -1, dtype=int)
    for v in range(n):
        if parent_edge[v] >= 0:
            child_of_edge[parent_edge[v]] = v
    e_ratio = ratio  # ratio applies from parent side to child side
    # flip ratio orientation if the spec edge points child -> parent
    for v in range(n):
        e = parent_edge[v]
        if e >= 0 and graph.edge_to[e] != v:
            # device was specified in the opposite direction; its ratio and
            # impedance are symmetric in this model except tap orientation,
            # which we keep tied to the device's to-bus. Reverse taps invert.
            if ratio[e] != 1.0:
                e_ratio = e_ratio.copy()
                e_ratio[e] = 1.0 / ratio[e]

    v_volt = np.full(n, complex(spec.ltc_setpoint, 0.0), dtype=complex)
    i_branch = np.zeros(n_edges, dtype=complex)
    rev = order[::-1]
    residual = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        # backward: accumulate branch currents toward the roots
        i_node = np.conj(s_injection / v_volt)
        i_acc = i_node.copy()
        for v in rev:
            e = parent_edge[v]
            if e < 0:
                continue
            i_branch[e] = i_acc[v]
            i_acc[parent_node[v]] += e_ratio[e] * i_acc[v]
        # forward: update voltages from the roots
        v_prev = v_volt.copy()
        for v in order:
            e = parent_edge[v]
            if e < 0:
                continue
            v_volt[v] = e_ratio[e] * v_volt[parent_node[v]] - z[e] * i_branch[e]
        # NaN from a divergent case propagates here and fails the tolerance
        # check, so divergence always exits through the iteration limit
        residual = float(np.max(np.abs(v_volt - v_prev)))
        if residual < tol:
            break
    else:
        raise PowerFlowError(
            f"power flow did not converge in {max_iter} iterations "
            f"(last residual {residual:.3e})", residual=residual)
    if not np.all(np.isfinite(v_volt)):
        raise PowerFlowError("solver produced non-finite voltages",
                             residual=residual)

    # one more backward pass with the final voltages makes bus-level complex
    # power conservation exact
    i_node = np.conj(s_injection / v_volt)
    i_acc = i_node.copy()
    for v2 in rev:
        e = parent_edge[v2]
        if e < 0:
            continue
        i_branch[e] = i_acc[v2]
        i_acc[parent_node[v2]] += e_ratio[e] * i_acc[v2]

    state = _assemble_state(spec, graph, s_injection, controls, timestamp,
                            status, ratio, tap_norm_edge, v_volt, i_branch,
                            parent_edge, parent_node, e_ratio, z)
    state.sweep_iterations = iterations
    return state


def _assemble_state(spec, graph, s_injection, controls, timestamp, status,
                    ratio, tap_norm_edge, v_volt, i_branch, parent_edge,
                    parent_node, e_ratio, z) -> net.SolvedState:
    n = graph.n_nodes
    n_edges = len(graph.edge_device)

    # sending-end flows oriented with the spec's from -> to direction
    edges: list[net.EdgeState] = []
    tap_node = np.zeros(n)
    sw_closed = np.ones(n)
    for e in range(n_edges):
        dev = graph.device_by_uid[graph.edge_device[e]]
        a, b = int(graph.edge_from[e]), int(graph.edge_to[e])
        if status[e] and parent_edge[b] == e:
            # tree orientation matches spec orientation
            s_from = v_volt[a] * np.conj(e_ratio[e] * i_branch[e])
        elif status[e] and parent_edge[a] == e:
            # power flows child -> parent relative to spec orientation
            s_from = -(v_volt[a] * np.conj(i_branch[e]))
        else:
            s_from = 0.0 + 0.0j
        in_phys = bool(status[e]) and dev.device in ("line", "cable", "switch")
        i_mag = abs(i_branch[e]) if (status[e] and
                                     (parent_edge[a] == e or parent_edge[b] == e)) \
            else 0.0
        edges.append(net.EdgeState(
            from_id=a, to_id=b, device=dev.device, phases=dev.phases,
            r_pu=dev.r_pu, x_pu=dev.x_pu, length_km=dev.length_km,
            rating_pu=dev.rating_pu, status=int(status[e]),
            tap=tap_norm_edge[e], p_flow_pu=float(s_from.real),
            q_flow_pu=float(s_from.imag), in_physics_set=in_phys,
            is_tie=dev.is_tie, i_mag_pu=float(i_mag)))
        if dev.device == "regulator" and status[e]:
            tap_node[b] = tap_norm_edge[e]
        if dev.device == "switch":
            sw_closed[a] = min(sw_closed[a], float(status[e]))
            sw_closed[b] = min(sw_closed[b], float(status[e]))

    cap_on = np.zeros(n)
    for f in spec.feeders:
        for c in f.capacitors:
            if c.on:
                for ph in net.PHASES:
                    nid = graph.node_of.get((c.bus_id, ph))
                    if nid is not None:
                        cap_on[nid] = 1.0

    head_flow: dict[int, complex] = {f.feeder_id: 0.0 + 0.0j for f in spec.feeders}
    head_node = {}
    for f in spec.feeders:
        for ph in net.PHASES:
            nid = graph.node_of.get((f.head_bus, ph))
            if nid is not None:
                head_node[nid] = f.feeder_id
    hub_set = set(graph.hub_node_ids)
    for e in range(n_edges):
        if not status[e]:
            continue
        a, b = int(graph.edge_from[e]), int(graph.edge_to[e])
        if a in hub_set and b in head_node:
            hub_side, feeder_side = a, b
        elif b in hub_set and a in head_node:
            hub_side, feeder_side = b, a
        else:
            continue
        if parent_edge[feeder_side] == e:
            s = v_volt[hub_side] * np.conj(e_ratio[e] * i_branch[e])
            head_flow[head_node[feeder_side]] += s

    s_subxfmr = sum(head_flow.values()) + spec.aux_load

    return net.SolvedState(
        timestamp=timestamp,
        bus_phases=graph.bus_phases,
        v_mag=np.abs(v_volt),
        p_injection_pu=s_injection.real.copy(),
        serving_rating_pu=graph.serving_rating.copy(),
        tap=tap_node,
        cap_on=cap_on,
        sw_closed=sw_closed,
        edges=edges,
        feeder_heads=head_flow,
        s_subxfmr=s_subxfmr,
        s_aux=spec.aux_load,
        q_injection_pu=s_injection.imag.copy(),
    )


def conservation_residuals(state: net.SolvedState) -> np.ndarray:
    """Per-node |complex power in - out - consumption| for a solved state.

    Hub nodes are the slack and are reported as zero.
    """
    q = state.q_injection_pu if state.q_injection_pu is not None \
        else np.zeros_like(state.p_injection_pu)
    s_injection = state.p_injection_pu + 1j * q
    acc = -s_injection.astype(complex).copy()
    for e in state.edges:
        if not e.status:
            continue
        s_from = complex(e.p_flow_pu, e.q_flow_pu)
        loss = complex(e.r_pu, e.x_pu) * e.i_mag_pu ** 2
        acc[e.from_id] -= s_from
        acc[e.to_id] += s_from - loss
    for bp in state.bus_phases:
        if bp.bus_type == "substation_hub":
            acc[bp.id] = 0.0
    return np.abs(acc)


# ---------------------------------------------------------------------------
# profiles and time series

def _ar1(gen, t: int, sigma: float, rho: float = 0.6) -> np.ndarray:
    eps = gen.normal(0.0, sigma, size=t)
    out = np.empty(t)
    prev = 0.0
    for i in range(t):
        prev = rho * prev + math.sqrt(1 - rho ** 2) * eps[i]
        out[i] = prev
    return out


def materialize_profile(profile: ProfileSpec, n_steps: int) -> np.ndarray:
    """Active-power series (p.u.) for n_steps 15-minute intervals."""
    gen = _rng(profile.noise_seed, "profile", profile.kind)
    hours = (np.arange(n_steps) * TIMESTEP_MINUTES / 60.0) % 24.0
    if profile.kind == "load":
        shape = 0.55 + 0.35 * np.cos(2 * np.pi * (hours - profile.peak_hour) / 24.0)
        shape = shape * (1.0 + _ar1(gen, n_steps, profile.noise_sigma))
        return profile.peak_pu * np.clip(shape, 0.08, 1.2)
    if profile.kind == "pv":
        elev = np.sin(np.pi * (hours - 6.0) / 12.5)
        elev = np.clip(elev, 0.0, None) ** 1.3
        cloud = np.clip(1.0 - np.abs(_ar1(gen, n_steps, profile.noise_sigma)), 0.15, 1.0)
        return profile.peak_pu * elev * cloud
    raise ValueError(f"unknown profile kind {profile.kind!r}")


class RegulatorController:
    """Deadband tap control: one step per timestep toward 1.0 p.u."""

    def __init__(self, graph: GraphIndex):
        self.reg_edges = [
            (graph.edge_device[e], graph.edge_phase[e], int(graph.edge_to[e]))
            for e in range(len(graph.edge_device))
            if graph.device_by_uid[graph.edge_device[e]].device == "regulator"
        ]

    def update(self, controls: Controls, state: net.SolvedState) -> None:
        for uid, phase, node in self.reg_edges:
            v = state.v_mag[node]
            tap = controls.taps.get((uid, phase), 0)
            if v < 1.0 - REG_DEADBAND and tap < REG_MAX_TAP:
                tap += 1
            elif v > 1.0 + REG_DEADBAND and tap > -REG_MAX_TAP:
                tap -= 1
            controls.taps[(uid, phase)] = tap


def run_timeseries(spec: SubstationSpec, scenario: ScenarioConfig,
                   graph: GraphIndex | None = None) -> list[net.SolvedState]:
    """Solve the scenario horizon at 15-minute resolution.

    Timesteps are independent given the control state carried over from the
    previous step (regulator taps). Tie closures listed in the scenario take
    effect at ``tie_close_step`` together with their sectionalizer opening.
    """
    graph = graph or build_graph(spec)
    n_steps = scenario.horizon_minutes // TIMESTEP_MINUTES

    loads = [l for f in spec.feeders for l in f.loads]
    ders = [d for f in spec.feeders for d in f.ders]
    load_nodes = np.array([graph.node_of[(l.bus_id, l.phase)] for l in loads], dtype=int)
    der_nodes = np.array([graph.node_of[(d.bus_id, d.phase)] for d in ders], dtype=int)
    load_p = np.stack([materialize_profile(l.profile, n_steps) for l in loads]) \
        if loads else np.zeros((0, n_steps))
    load_q = np.stack([p * math.tan(math.acos(l.profile.pf))
                       for p, l in zip(load_p, loads)]) \
        if loads else np.zeros((0, n_steps))
    pv_scale = scenario.der_penetration / 100.0
    der_p = np.stack([pv_scale * materialize_profile(d.profile, n_steps)
                      for d in ders]) if ders else np.zeros((0, n_steps))

    cap_q = np.zeros(graph.n_nodes)
    for f in spec.feeders:
        for c in f.capacitors:
            if c.on:
                share = c.q_pu / len(net.PHASES)
                for ph in net.PHASES:
                    nid = graph.node_of.get((c.bus_id, ph))
                    if nid is not None:
                        cap_q[nid] += share

    controls = Controls()
    controller = RegulatorController(graph)
    states: list[net.SolvedState] = []
    for t in range(n_steps):
        if scenario.tie_closures and t >= scenario.tie_close_step:
            for ti in scenario.tie_closures:
                tie = spec.ties[ti]
                controls.closed_override[tie.device_uid] = True
                controls.closed_override[tie.sectionalizer_uid] = False
        s_inj = np.zeros(graph.n_nodes, dtype=complex)
        if len(loads):
            np.add.at(s_inj, load_nodes, load_p[:, t] + 1j * load_q[:, t])
        if len(ders):
            np.add.at(s_inj, der_nodes, -der_p[:, t])
        s_inj -= 1j * cap_q
        try:
            state = solve_powerflow(spec, graph, s_inj, controls,
                                    timestamp=float(t * TIMESTEP_MINUTES))
        except PowerFlowError as exc:
            raise PowerFlowError(f"timestep {t}: {exc}", exc.residual) from exc
        states.append(state)
        controller.update(controls, state)
    return states


def solve_timestep(spec: SubstationSpec, timestep: int,
                   scenario: ScenarioConfig | None = None,
                   controls: Controls | None = None) -> net.SolvedState:
    """Solve one step of a scenario with explicit control state.

    Unlike run_timeseries this does not evolve regulator taps; pass the
    Controls you want applied. Profiles are deterministic per step, so the
    injections match the same step of a full run.
    """
    scenario = scenario or ScenarioConfig()
    n_steps = scenario.horizon_minutes // TIMESTEP_MINUTES
    if not 0 <= timestep < n_steps:
        raise ValueError(f"timestep {timestep} outside horizon of {n_steps} steps")
    graph = build_graph(spec)
    controls = controls or Controls()
    loads = [l for f in spec.feeders for l in f.loads]
    ders = [d for f in spec.feeders for d in f.ders]
    s_inj = np.zeros(graph.n_nodes, dtype=complex)
    for l in loads:
        p = materialize_profile(l.profile, n_steps)[timestep]
        q = p * math.tan(math.acos(l.profile.pf))
        s_inj[graph.node_of[(l.bus_id, l.phase)]] += p + 1j * q
    pv_scale = scenario.der_penetration / 100.0
    for d in ders:
        p = pv_scale * materialize_profile(d.profile, n_steps)[timestep]
        s_inj[graph.node_of[(d.bus_id, d.phase)]] -= p
    for f in spec.feeders:
        for c in f.capacitors:
            if c.on:
                share = c.q_pu / len(net.PHASES)
                for ph in net.PHASES:
                    nid = graph.node_of.get((c.bus_id, ph))
                    if nid is not None:
                        s_inj[nid] -= 1j * share
    if scenario.tie_closures and timestep >= scenario.tie_close_step:
        for ti in scenario.tie_closures:
            tie = spec.ties[ti]
            controls.closed_override.setdefault(tie.device_uid, True)
            controls.closed_override.setdefault(tie.sectionalizer_uid, False)
    return solve_powerflow(spec, graph, s_inj, controls,
                           timestamp=float(timestep * TIMESTEP_MINUTES))
