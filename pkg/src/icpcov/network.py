"""Point network mapping a decimated cloud pair to a Gaussian over the ICP error.

Layout: shared set-conv layers on both clouds, a flow-embedding layer
correlating them, further set convs on the reading branch, set-upconv layers
with skip links back to the first level, a per-point regression to a small
feature field, a global max pool and a final head emitting 27 numbers
(6 mean components, 15 strictly-lower LDL entries, 6 log-diagonal entries).
Every hidden MLP unit is Linear -> ReLU -> Dropout.
"""

from __future__ import annotations

import hashlib
import json
import weakref
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .pointcloud import FilteredPair, SpatialIndex, farthest_point_sample
from .tape import Node, Tape

TRIL = np.tril_indices(6, -1)
NUM_OUTPUTS = 27


@dataclass(frozen=True)
class SetConvSpec:
    radius: float
    sample_rate: float
    mlp: tuple[int, ...]


@dataclass(frozen=True)
class UpConvSpec:
    radius: float
    mlp: tuple[int, ...]
    mlp2: tuple[int, ...]


_TABLE_PRE = (SetConvSpec(2.0, 1.0, (32, 32, 64)), SetConvSpec(4.0, 0.25, (64, 64, 128)))
_TABLE_POST = (SetConvSpec(8.0, 0.25, (128, 128, 256)), SetConvSpec(16.0, 0.125, (256, 256, 512)))
_TABLE_UP = (
    UpConvSpec(16.0, (), (256, 256)),
    UpConvSpec(8.0, (128, 128, 256), (256,)),
    UpConvSpec(4.0, (128, 128, 256), (256,)),
)


@dataclass(frozen=True)
class NetworkConfig:
    num_points: int = 2048
    in_features: int = 3
    set_conv_pre: tuple[SetConvSpec, ...] = _TABLE_PRE
    flow_k: int = 16
    flow_mlp: tuple[int, ...] = (128, 128, 128)
    set_conv_post: tuple[SetConvSpec, ...] = _TABLE_POST
    set_upconv: tuple[UpConvSpec, ...] = _TABLE_UP
    regression_mlp: tuple[int, ...] = (128,)
    regression_dim: int = 3
    head_mlp: tuple[int, ...] = (64,)
    dropout_rate: float = 0.2
    scale_factor: float = 1.0
    max_group: int = 32
    # per-dimension scale of the error twist; the raw head works in units of it
    output_scale: tuple[float, ...] = (1.0,) * 6

    def __post_init__(self):
        for s in self.set_conv_pre + self.set_conv_post:
            if not 0 < s.sample_rate <= 1:
                raise ValueError("sample rates must lie in (0, 1]")
            if s.radius <= 0:
                raise ValueError("radii must be positive")
        if not self.set_conv_pre or not self.set_conv_post:
            raise ValueError("need at least one set conv before and after the flow embedding")
        levels = len(self.set_conv_pre) + len(self.set_conv_post)
        if len(self.set_upconv) != levels - 1:
            raise ValueError(f"need {levels - 1} set upconv layers, got {len(self.set_upconv)}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if len(self.output_scale) != 6 or not all(0 < v < np.inf for v in self.output_scale):
            raise ValueError("output_scale needs 6 positive finite entries")

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        """Quarter-width layers on 256-point pairs."""
        return replace(cls(num_points=256, scale_factor=0.25), **overrides)

    def width(self, w: int) -> int:
        return max(1, int(round(w * self.scale_factor)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["set_conv_pre"] = tuple(SetConvSpec(s["radius"], s["sample_rate"], tuple(s["mlp"])) for s in d["set_conv_pre"])
        d["set_conv_post"] = tuple(SetConvSpec(s["radius"], s["sample_rate"], tuple(s["mlp"])) for s in d["set_conv_post"])
        d["set_upconv"] = tuple(UpConvSpec(s["radius"], tuple(s["mlp"]), tuple(s["mlp2"])) for s in d["set_upconv"])
        for k in ("flow_mlp", "regression_mlp", "head_mlp", "output_scale"):
            d[k] = tuple(d[k])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- parameters ---------------------------------------------------------------


def _mlp_layout(prefix, c_in, widths, cfg, scaled=True):
    out = []
    for j, w in enumerate(widths):
        w = cfg.width(w) if scaled else w
        out.append((f"{prefix}.{j}", c_in, w))
        c_in = w
    return out, c_in


def layer_table(cfg: NetworkConfig) -> list[tuple[str, int, int]]:
    """Ordered ``(layer name, fan_in, fan_out)`` for every linear layer."""
    layers = []
    c = cfg.in_features
    skips = []
    for i, s in enumerate(cfg.set_conv_pre):
        ls, c = _mlp_layout(f"conv{i}", 3 + c, s.mlp, cfg)
        layers += ls
        skips.append(c)
    ls, c_flow = _mlp_layout("flow", 2 * c + 3, cfg.flow_mlp, cfg)
    layers += ls
    skips[-1] += c_flow
    c = c_flow
    p = len(cfg.set_conv_pre)
    for i, s in enumerate(cfg.set_conv_post):
        ls, c = _mlp_layout(f"conv{p + i}", 3 + c, s.mlp, cfg)
        layers += ls
        skips.append(c)
    # upconvs walk from the deepest level back to level 1
    for u, spec in enumerate(cfg.set_upconv):
        fine = len(skips) - 2 - u
        ls, c = _mlp_layout(f"up{u}.a", 3 + c, spec.mlp, cfg)
        layers += ls
        ls, c = _mlp_layout(f"up{u}.b", c + skips[fine], spec.mlp2, cfg)
        layers += ls
    ls, c = _mlp_layout("reg", c, cfg.regression_mlp, cfg)
    layers += ls + [("reg.out", c, cfg.regression_dim)]
    ls, c = _mlp_layout("head", cfg.regression_dim, cfg.head_mlp, cfg, scaled=False)
    layers += ls + [("head.out", c, NUM_OUTPUTS)]
    return layers


def param_layout(cfg: NetworkConfig) -> dict[str, tuple[int, tuple[int, ...]]]:
    layout, off = {}, 0
    for name, fi, fo in layer_table(cfg):
        layout[name + ".W"] = (off, (fi, fo))
        off += fi * fo
        layout[name + ".b"] = (off, (fo,))
        off += fo
    return layout


def param_count(cfg: NetworkConfig) -> int:
    return sum(fi * fo + fo for _, fi, fo in layer_table(cfg))


def segment_slices(cfg: NetworkConfig, prefixes) -> np.ndarray:
    """Boolean mask over the flat vector selecting layers by name prefix.

    ``"conv0"`` matches ``conv0.0``, ``conv0.1``...; ``"all"`` matches everything.
    """
    layout = param_layout(cfg)
    mask = np.zeros(param_count(cfg), dtype=bool)
    prefixes = tuple(prefixes or ())
    for name, (off, shape) in layout.items():
        layer = name.rsplit(".", 1)[0]
        if "all" in prefixes or any(layer == p or layer.startswith(p + ".") for p in prefixes):
            mask[off : off + int(np.prod(shape))] = True
    return mask


def init_params(cfg: NetworkConfig, seed=0) -> np.ndarray:
    """Glorot-uniform weights, zero biases, zero final head (start at mu=0, Sigma=diag(scale^2))."""
    rng = np.random.default_rng(seed)
    params = np.zeros(param_count(cfg))
    layout = param_layout(cfg)
    for name, fi, fo in layer_table(cfg):
        if name == "head.out":
            continue
        off, shape = layout[name + ".W"]
        lim = np.sqrt(6.0 / (fi + fo))
        params[off : off + fi * fo] = rng.uniform(-lim, lim, fi * fo)
    return params


# -- prediction container -----------------------------------------------------


def ldl_factors(ldl_params):
    p = np.asarray(ldl_params, dtype=float)
    if p.shape != (21,) or not np.all(np.isfinite(p)):
        raise ValueError("expected 21 finite LDL parameters")
    L = np.eye(6)
    L[TRIL] = p[:15]
    return L, np.exp(p[15:])


def ldl_to_covariance(ldl_params) -> np.ndarray:
    """``L diag(exp(d_raw)) L^T`` from 15 lower entries followed by 6 log-diagonals."""
    L, d = ldl_factors(ldl_params)
    S = (L * d) @ L.T
    return 0.5 * (S + S.T)


@dataclass(eq=False)
class GaussianPrediction:
    mu: np.ndarray
    ldl_params: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return ldl_to_covariance(self.ldl_params)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.ldl_params])

    @classmethod
    def from_vector(cls, v) -> "GaussianPrediction":
        v = np.asarray(v, dtype=float)
        return cls(v[:6].copy(), v[6:].copy())


def output_affine(cfg: NetworkConfig):
    """Constant ``(factor, offset)`` mapping raw head outputs to physical units."""
    s = np.asarray(cfg.output_scale, dtype=float)
    factor = np.ones(NUM_OUTPUTS)
    offset = np.zeros(NUM_OUTPUTS)
    factor[:6] = s
    factor[6:21] = s[TRIL[0]] / s[TRIL[1]]
    offset[21:] = 2.0 * np.log(s)
    return factor, offset


# -- geometry -----------------------------------------------------------------


@dataclass
class Grouping:
    """Neighbour indices ``(M, K)`` into a source set, validity mask and offsets."""

    idx: np.ndarray
    valid: np.ndarray
    offsets: np.ndarray


def _group(source_pts, query_pts, k, radius, self_fill=None) -> Grouping:
    n = len(source_pts)
    k = min(k, n)
    d, idx = SpatialIndex(source_pts).knn(query_pts, k, radius)
    valid = np.isfinite(d)
    fill = 0 if self_fill is None else self_fill[:, None]
    idx = np.where(valid, idx, fill)
    offsets = np.where(valid[..., None], source_pts[idx] - query_pts[:, None, :], 0.0)
    return Grouping(idx, valid, offsets)


def sample_count(n: int, rate: float) -> int:
    return max(1, int(round(rate * n)))


@dataclass
class SetConvGeometry:
    centers: np.ndarray
    points: np.ndarray
    group: Grouping


def set_conv_geometry(points, spec: SetConvSpec, max_group: int) -> SetConvGeometry:
    m = sample_count(len(points), spec.sample_rate)
    centers = farthest_point_sample(points, m)
    cpts = points[centers]
    return SetConvGeometry(centers, cpts, _group(points, cpts, max_group, spec.radius, self_fill=centers))


@dataclass
class PairGeometry:
    pre1: list
    pre2: list
    flow: Grouping
    post: list
    up: list

    def level_points(self):
        """Point sets of the reading branch at levels 1..top."""
        return [g.points for g in self.pre1] + [g.points for g in self.post]


_GEOMETRY_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _geometry_key(cfg: NetworkConfig):
    return (cfg.set_conv_pre, cfg.set_conv_post, cfg.set_upconv, cfg.flow_k, cfg.max_group)


def pair_geometry(pair: FilteredPair, cfg: NetworkConfig) -> PairGeometry:
    """Sampling and grouping indices; depends on coordinates only, cached per pair."""
    per_pair = _GEOMETRY_CACHE.setdefault(pair, {})
    key = _geometry_key(cfg)
    if key in per_pair:
        return per_pair[key]

    def pre(points):
        out = []
        for spec in cfg.set_conv_pre:
            g = set_conv_geometry(points, spec, cfg.max_group)
            out.append(g)
            points = g.points
        return out

    pre1, pre2 = pre(pair.reading.points), pre(pair.reference.points)
    p1, p2 = pre1[-1].points, pre2[-1].points
    flow = _group(p2, p1, cfg.flow_k, np.inf)
    post, pts = [], p1
    for spec in cfg.set_conv_post:
        g = set_conv_geometry(pts, spec, cfg.max_group)
        post.append(g)
        pts = g.points
    levels = [g.points for g in pre1] + [g.points for g in post]
    up = []
    for u, spec in enumerate(cfg.set_upconv):
        coarse, fine = levels[len(levels) - 1 - u], levels[len(levels) - 2 - u]
        up.append(_group(coarse, fine, cfg.max_group, spec.radius))
    geom = PairGeometry(pre1, pre2, flow, post, up)
    per_pair[key] = geom
    return geom


# -- layers ---------------------------------------------------------------------


class DropoutSampler:
    """Inverted-dropout masks drawn in call order from one seed."""

    def __init__(self, rate: float, seed):
        self.rate = rate
        self.rng = None if seed is None or rate == 0 else np.random.default_rng(seed)

    def mask(self, shape) -> np.ndarray | None:
        if self.rng is None:
            return None
        keep = self.rng.random(shape, dtype=np.float32) >= self.rate
        return keep / (1.0 - self.rate)


def mlp(tape: Tape, x, prefix: str, n_layers: int, drop: DropoutSampler | None, start: int = 0):
    """ReLU layers ``start .. n_layers - 1``, each followed by dropout when ``drop`` is active."""
    for j in range(start, n_layers):
        x = _activate(tape, tape.linear(x, f"{prefix}.{j}"), drop)
    return x


def _activate(tape, h, drop):
    return tape.relu(h, None if drop is None else drop.mask(h.shape))


def _grouped_linear(tape, name, terms):
    """First layer on a concatenation of per-neighbour inputs, without building it.

    ``terms`` lists the concatenated blocks in order as ``(array, idx)``: with
    ``idx`` the block is ``array[idx]``, otherwise ``array`` itself. Since
    ``x[idx] @ W == (x @ W)[idx]``, gathered blocks are multiplied before
    gathering, once per source point instead of once per neighbour.
    """
    out, row = [], 0
    for k, (x, idx) in enumerate(terms):
        width = _value_width(x)
        h = tape.linear(x, name, rows=slice(row, row + width), bias=k == 0)
        out.append(h if idx is None else tape.gather(h, idx))
        row += width
    return tape.add(*out)


def _value_width(x):
    return (x.value if isinstance(x, Node) else x).shape[-1]


def set_conv(tape, features, geom: SetConvGeometry, prefix, n_layers, drop=None):
    """Group neighbours of each sampled centre, shared MLP on (offset, feature), max pool."""
    g = geom.group
    h = _grouped_linear(tape, f"{prefix}.0", [(g.offsets, None), (features, g.idx)])
    x = mlp(tape, _activate(tape, h, drop), prefix, n_layers, drop, start=1)
    return tape.max_pool(x, g.valid)


def flow_embedding(tape, feats1, feats2, group: Grouping, prefix, n_layers, drop=None):
    """For each reading point: MLP on (own feature, neighbour feature, displacement), max pool."""
    k = group.idx.shape[1]
    own = np.repeat(np.arange(group.idx.shape[0])[:, None], k, axis=1)
    h = _grouped_linear(tape, f"{prefix}.0", [(feats1, own), (feats2, group.idx), (group.offsets, None)])
    x = mlp(tape, _activate(tape, h, drop), prefix, n_layers, drop, start=1)
    return tape.max_pool(x, group.valid)


def set_upconv(tape, coarse_feats, skip, group: Grouping, prefix, n_a, n_b, drop=None):
    """Propagate coarse features onto fine points, then fuse with skip features."""
    if n_a:
        h = _grouped_linear(tape, prefix + ".a.0", [(group.offsets, None), (coarse_feats, group.idx)])
        x = mlp(tape, _activate(tape, h, drop), prefix + ".a", n_a, drop, start=1)
    else:
        x = tape.concat([group.offsets, tape.gather(coarse_feats, group.idx)])
    x = tape.max_pool(x, group.valid)
    x = tape.concat([x, skip])
    return mlp(tape, x, prefix + ".b", n_b, drop)


# -- full network ---------------------------------------------------------------


def _input_features(cloud):
    if cloud.normals is None:
        raise ValueError("network input clouds need normals")
    return cloud.normals


def _forward(pair: FilteredPair, params, cfg: NetworkConfig, dropout_seed, record):
    if len(pair.reading) != cfg.num_points or len(pair.reference) != cfg.num_points:
        raise ValueError(
            f"pair has {len(pair.reading)}/{len(pair.reference)} points, config expects {cfg.num_points}"
        )
    params = np.asarray(params, dtype=float)
    if params.shape != (param_count(cfg),):
        raise ValueError(f"expected {param_count(cfg)} parameters, got {params.shape}")
    geom = pair_geometry(pair, cfg)
    tape = Tape(params, param_layout(cfg), record=record)
    drop = DropoutSampler(cfg.dropout_rate, dropout_seed)

    def branch(cloud, levels):
        f = _input_features(cloud)
        feats = []
        for i, (g, spec) in enumerate(zip(levels, cfg.set_conv_pre)):
            f = set_conv(tape, f, g, f"conv{i}", len(spec.mlp), drop)
            feats.append(f)
        return feats

    feats1 = branch(pair.reading, geom.pre1)
    feats2 = branch(pair.reference, geom.pre2)
    flow = flow_embedding(tape, feats1[-1], feats2[-1], geom.flow, "flow", len(cfg.flow_mlp), drop)
    skips = feats1[:-1] + [tape.concat([feats1[-1], flow])]
    f = flow
    p = len(cfg.set_conv_pre)
    for i, (g, spec) in enumerate(zip(geom.post, cfg.set_conv_post)):
        f = set_conv(tape, f, g, f"conv{p + i}", len(spec.mlp), drop)
        skips.append(f)
    for u, spec in enumerate(cfg.set_upconv):
        fine = len(skips) - 2 - u
        f = set_upconv(tape, f, skips[fine], geom.up[u], f"up{u}", len(spec.mlp), len(spec.mlp2), drop)
    f = mlp(tape, f, "reg", len(cfg.regression_mlp), drop)
    field_ = tape.linear(f, "reg.out")
    pooled = tape.max_pool(field_)
    h = mlp(tape, pooled, "head", len(cfg.head_mlp), drop)
    raw = tape.linear(h, "head.out")
    factor, offset = output_affine(cfg)
    out = tape.scale(raw, factor, offset)
    return GaussianPrediction.from_vector(out.value), tape, out


def forward(pair: FilteredPair, params, cfg: NetworkConfig, dropout_seed=None) -> GaussianPrediction:
    """Prediction for one pair; ``dropout_seed=None`` disables dropout."""
    pred, _, _ = _forward(pair, params, cfg, dropout_seed, record=False)
    return pred


class ForwardTape:
    """A recorded forward pass; :meth:`backward` may be called once."""

    def __init__(self, pair, params, cfg, dropout_seed=None):
        self.prediction, self._tape, self._out = _forward(pair, params, cfg, dropout_seed, record=True)
        self.cfg = cfg

    def backward(self, upstream, frozen=()) -> np.ndarray:
        """Gradient of ``upstream . outputs`` w.r.t. the flat parameters."""
        grad = self._tape.backward(self._out, np.asarray(upstream, dtype=float).reshape(NUM_OUTPUTS))
        if frozen:
            grad[segment_slices(self.cfg, frozen)] = 0.0
        return grad


def backward(pair, params, cfg, dropout_seed, upstream, frozen=()) -> np.ndarray:
    return ForwardTape(pair, params, cfg, dropout_seed).backward(upstream, frozen)


# -- parameter files --------------------------------------------------------------

MAGIC = b"ICPCOVP1"


def save_arrays(path, cfg: NetworkConfig, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Flat little-endian float64 payload after a length-prefixed JSON header."""
    segments, off = [], 0
    for name, a in arrays.items():
        a = np.asarray(a, dtype=float).reshape(-1)
        segments.append({"name": name, "offset": off, "count": int(a.size)})
        off += a.size
    header = {
        "format": "icpcov-params",
        "version": 1,
        "endianness": "little",
        "dtype": "float64",
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "arrays": segments,
        "layers": [{"name": k, "offset": v[0], "shape": list(v[1])} for k, v in param_layout(cfg).items()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = np.concatenate([np.asarray(a, dtype="<f8").reshape(-1) for a in arrays.values()]) if arrays else np.zeros(0)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        f.write(payload.astype("<f8").tobytes())


def load_arrays(path, expected: NetworkConfig | None = None):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not an icpcov parameter file")
    n = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + n])
    if header.get("endianness") != "little":
        raise ValueError(f"{path}: unsupported endianness")
    cfg = NetworkConfig.from_dict(header["config"])
    if cfg.hash() != header["config_hash"]:
        raise ValueError(f"{path}: header config does not match its hash")
    if expected is not None and expected.hash() != header["config_hash"]:
        raise ValueError(f"config hash mismatch: file {header['config_hash']} vs expected {expected.hash()}")
    data = np.frombuffer(raw[16 + n :], dtype="<f8")
    arrays = {s["name"]: data[s["offset"] : s["offset"] + s["count"]].astype(float) for s in header["arrays"]}
    if arrays.get("params") is not None and arrays["params"].size != param_count(cfg):
        raise ValueError(f"{path}: parameter count does not match config")
    return cfg, arrays, header.get("extra", {})


def save_params(path, params, cfg: NetworkConfig) -> None:
    save_arrays(path, cfg, {"params": params})


def load_params(path, expected: NetworkConfig | None = None):
    cfg, arrays, _ = load_arrays(path, expected)
    return arrays["params"], cfg
