"""Small point-cloud networks with a per-point mixing hook.

Two encoders are provided, a shared-MLP one (``pointnet-mini``) and a
dynamic-graph one (``edgeconv-mini``). Both expose the same layer numbering:
layer 0 is the raw coordinates and layers 1-3 are per-point feature layers
ahead of global max pooling. Any of them can host the mixing hook and an
optional T-net that aligns the features at that layer.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import InvalidInputError, RngStream, batched_sq_dist, knn_indices, rng_stream

ARCHS = ("pointnet-mini", "edgeconv-mini")
TASKS = ("cls", "seg")
TNET_POSITIONS = ("after", "before", "off")
TNET_HIDDEN = 32


@dataclass
class LayerSpec:
    kind: str  # shared-mlp | edgeconv | tnet | max-pool | fc
    in_dim: int
    out_dim: int
    k_neighbors: int = 0
    eligible_for_pmc: bool = False
    name: str = ""

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidInputError(f"layer dims must be >= 1: {self}")


@dataclass
class HookPoint:
    layer: int | str = 0  # an eligible layer index or "random"

    def resolve(self, eligible: Sequence[int], rng: Optional[RngStream] = None) -> int:
        if self.layer == "random":
            if rng is None:
                raise InvalidInputError("random hook policy needs an rng")
            return int(eligible[int(rng.integers(len(eligible)))])
        if int(self.layer) not in eligible:
            raise InvalidInputError(f"layer {self.layer} is not eligible; choose from {list(eligible)}")
        return int(self.layer)


class ModelParams:
    """Ordered, named parameter tensors with flat addressing."""

    def __init__(self, tensors: Optional[OrderedDict] = None):
        self.tensors: OrderedDict[str, Tensor] = tensors if tensors is not None else OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list:
        return list(self.tensors)

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([np.zeros(t.data.size) if t.grad is None else t.grad.ravel()
                               for t in self.tensors.values()])

    def set_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise InvalidInputError(f"flat vector has {vec.shape}, expected ({self.size},)")
        off = 0
        for t in self.tensors.values():
            t.data = vec[off:off + t.data.size].reshape(t.data.shape).copy()
            off += t.data.size

    def locate(self, flat_index: int):
        """Map a flat index to (name, index tuple)."""
        off = 0
        for name, t in self.tensors.items():
            if flat_index < off + t.data.size:
                return name, np.unravel_index(flat_index - off, t.data.shape)
            off += t.data.size
        raise IndexError(flat_index)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for name, t in self.tensors.items():
            out.add(name, t.data.copy())
        return out


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------


def shared_mlp_forward(x, weight, bias, activation: bool = True) -> Tensor:
    """Apply the same affine map (and ReLU) to every point of a B x N x din input."""
    x, weight, bias = ad.as_tensor(x), ad.as_tensor(weight), ad.as_tensor(bias)
    if x.shape[-1] != weight.shape[0]:
        raise InvalidInputError(f"input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x @ weight + bias
    return out.relu() if activation else out


def knn_graph(values: np.ndarray, k: int) -> np.ndarray:
    """B x N x k neighbour indices in feature space, self excluded, lowest index on ties."""
    n = values.shape[1]
    if k >= n:
        raise InvalidInputError(f"k_neighbors={k} must be smaller than N={n}")
    return knn_indices(batched_sq_dist(values), k, exclude_self=True)


def edgeconv_forward(x, weight, bias, k_neighbors: int, idx: Optional[np.ndarray] = None) -> Tensor:
    """EdgeConv: ReLU(W [x_i, x_j - x_i] + b) maximised over the k nearest j.

    ``weight`` is (2 din) x dout. The neighbour graph is rebuilt from the
    current features unless ``idx`` is given; it carries no gradient.
    """
    x, weight, bias = ad.as_tensor(x), ad.as_tensor(weight), ad.as_tensor(bias)
    din = x.shape[-1]
    if weight.shape[0] != 2 * din:
        raise InvalidInputError(f"edgeconv weight needs {2 * din} rows, has {weight.shape[0]}")
    if idx is None:
        idx = knn_graph(x.data, k_neighbors)
    w_center, w_edge = weight[:din], weight[din:]
    # W_c x_i + W_e (x_j - x_i) = (W_c - W_e) x_i + W_e x_j
    own = x @ (w_center - w_edge) + bias
    nbr = ad.gather_neighbors(x @ w_edge, idx)
    b, n, _ = x.shape
    pre = nbr + own.reshape(b, n, 1, weight.shape[1])
    # relu and max commute
    return pre.max(axis=2).relu()


def max_pool_global(x) -> Tensor:
    x = ad.as_tensor(x)
    return x.max(axis=1)


def tnet_forward(feat, params: dict) -> tuple:
    """Predict a d x d matrix per cloud and apply it to every feature row.

    ``params`` holds ``conv_w, conv_b, fc1_w, fc1_b, fc2_w, fc2_b``; the last
    bias is the flattened identity at initialisation.
    """
    feat = ad.as_tensor(feat)
    b, n, d = feat.shape
    h = shared_mlp_forward(feat, params["conv_w"], params["conv_b"])
    g = max_pool_global(h)
    g = (g @ params["fc1_w"] + params["fc1_b"]).relu()
    a = (g @ params["fc2_w"] + params["fc2_b"]).reshape(b, d, d)
    # rows: y_n = A x_n  ->  Y = X A^T
    out = feat @ a.transpose(0, 2, 1)
    return out, a


def tnet_regularizer(a) -> Tensor:
    """Squared Frobenius norm of I - A A^T (averaged over a leading batch axis)."""
    a = ad.as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise InvalidInputError(f"regularizer needs square matrices, got {a.shape}")
    d = a.shape[-1]
    if a.ndim == 2:
        a = a.reshape(1, d, d)
    diff = np.eye(d) - a @ a.transpose(0, 2, 1)
    per = (diff * diff).sum(axis=(1, 2))
    return per.mean()


def _he(rng: RngStream, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class PointModel:
    """Common layer numbering, hook handling, T-nets and heads.

    Parameters
    ----------
    arch : "pointnet-mini" or "edgeconv-mini"
    num_classes : object classes (C1); also the size of the category one-hot in seg mode
    num_parts : part classes (C2), required for ``task="seg"``
    tnet : where the T-net sits relative to the mixing hook ("after", "before", "off")
    tnet_layers : layers that carry a T-net; defaults to layers 0-2
    """

    EMBED = 128
    HIDDEN = (32, 64)
    # a 128 x 128 transform right before pooling costs more than the rest of
    # the network combined, so by default only the narrower layers carry one
    DEFAULT_TNET_LAYERS = (0, 1, 2)

    def __init__(self, arch: str = "pointnet-mini", num_classes: int = 4, num_parts: Optional[int] = None,
                 task: str = "cls", tnet: str = "after", tnet_layers: Optional[Sequence[int]] = None,
                 k_neighbors: int = 8, seed: int = 0):
        if arch not in ARCHS:
            raise InvalidInputError(f"unknown architecture {arch!r}")
        if task not in TASKS:
            raise InvalidInputError(f"unknown task {task!r}")
        if tnet not in TNET_POSITIONS:
            raise InvalidInputError(f"tnet must be one of {TNET_POSITIONS}")
        if task == "seg" and not num_parts:
            raise InvalidInputError("segmentation needs num_parts")
        self.arch = arch
        self.task = task
        self.num_classes = int(num_classes)
        self.num_parts = int(num_parts) if num_parts else None
        self.tnet = tnet
        self.k_neighbors = int(k_neighbors)
        self.layer_dims = {0: 3, 1: self.HIDDEN[0], 2: self.HIDDEN[1], 3: self.EMBED}
        self.eligible_layers = (0, 1, 2, 3)
        if tnet == "off":
            self.tnet_layers: tuple = ()
        elif tnet_layers is None:
            self.tnet_layers = self.DEFAULT_TNET_LAYERS
        else:
            bad = [k for k in tnet_layers if k not in self.eligible_layers]
            if bad:
                raise InvalidInputError(f"tnet layers {bad} are not eligible")
            self.tnet_layers = tuple(sorted(set(int(k) for k in tnet_layers)))
        self.seed = seed
        self.params = ModelParams()
        self._build(rng_stream(seed, "init"))

    # -- construction -----------------------------------------------------------
    def _build(self, rng: RngStream):
        p = self.params
        d0, d1, d2, d3 = (self.layer_dims[i] for i in range(4))
        if self.arch == "pointnet-mini":
            p.add("l1.w", _he(rng, d0, (d0, d1))); p.add("l1.b", np.zeros(d1))
            p.add("l2.w", _he(rng, d1, (d1, d2))); p.add("l2.b", np.zeros(d2))
            p.add("l3.w", _he(rng, d2, (d2, d3))); p.add("l3.b", np.zeros(d3))
        else:
            p.add("l1.w", _he(rng, 2 * d0, (2 * d0, d1))); p.add("l1.b", np.zeros(d1))
            p.add("l2.w", _he(rng, 2 * d1, (2 * d1, d2))); p.add("l2.b", np.zeros(d2))
            p.add("l3.w", _he(rng, d1 + d2, (d1 + d2, d3))); p.add("l3.b", np.zeros(d3))
        for k in self.tnet_layers:
            d = self.layer_dims[k]
            p.add(f"tnet{k}.conv_w", _he(rng, d, (d, TNET_HIDDEN)))
            p.add(f"tnet{k}.conv_b", np.zeros(TNET_HIDDEN))
            p.add(f"tnet{k}.fc1_w", _he(rng, TNET_HIDDEN, (TNET_HIDDEN, TNET_HIDDEN)))
            p.add(f"tnet{k}.fc1_b", np.zeros(TNET_HIDDEN))
            p.add(f"tnet{k}.fc2_w", np.zeros((TNET_HIDDEN, d * d)))
            p.add(f"tnet{k}.fc2_b", np.eye(d).ravel())
        if self.task == "cls":
            p.add("fc1.w", _he(rng, d3, (d3, 64))); p.add("fc1.b", np.zeros(64))
            p.add("fc2.w", _he(rng, 64, (64, self.num_classes)) * 0.5)
            p.add("fc2.b", np.zeros(self.num_classes))
        else:
            din = self.seg_input_dim
            p.add("seg1.w", _he(rng, din, (din, 128))); p.add("seg1.b", np.zeros(128))
            p.add("seg2.w", _he(rng, 128, (128, self.num_parts)) * 0.5)
            p.add("seg2.b", np.zeros(self.num_parts))

    @property
    def seg_input_dim(self) -> int:
        return self.EMBED + self.HIDDEN[0] + self.HIDDEN[1] + self.num_classes

    def layer_specs(self) -> list:
        d = self.layer_dims
        specs = []
        if self.arch == "pointnet-mini":
            specs += [LayerSpec("shared-mlp", d[0], d[1], eligible_for_pmc=True, name="l1"),
                      LayerSpec("shared-mlp", d[1], d[2], eligible_for_pmc=True, name="l2"),
                      LayerSpec("shared-mlp", d[2], d[3], eligible_for_pmc=True, name="l3")]
        else:
            specs += [LayerSpec("edgeconv", d[0], d[1], self.k_neighbors, True, "l1"),
                      LayerSpec("edgeconv", d[1], d[2], self.k_neighbors, True, "l2"),
                      LayerSpec("shared-mlp", d[1] + d[2], d[3], eligible_for_pmc=True, name="l3")]
        for k in self.tnet_layers:
            specs.append(LayerSpec("tnet", d[k], d[k], name=f"tnet{k}"))
        specs.append(LayerSpec("max-pool", d[3], d[3], name="pool"))
        if self.task == "cls":
            specs += [LayerSpec("fc", d[3], 64, name="fc1"),
                      LayerSpec("fc", 64, self.num_classes, name="fc2")]
        else:
            specs += [LayerSpec("shared-mlp", self.seg_input_dim, 128, name="seg1"),
                      LayerSpec("shared-mlp", 128, self.num_parts, name="seg2")]
        return specs

    def config(self) -> dict:
        return {"arch": self.arch, "task": self.task, "num_classes": self.num_classes,
                "num_parts": self.num_parts, "tnet": self.tnet, "tnet_layers": list(self.tnet_layers),
                "k_neighbors": self.k_neighbors, "seed": self.seed}

    # -- forward ------------------------------------------------------------------
    def _tnet(self, k: int, h: Tensor, regs: list) -> Tensor:
        tp = {key: self.params[f"tnet{k}.{key}"]
              for key in ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")}
        out, a = tnet_forward(h, tp)
        regs.append(tnet_regularizer(a))
        return out

    def _at_layer(self, k: int, h: Tensor, feats: dict, hook: Optional[int],
                  mixer: Optional[Callable], regs: list) -> Tensor:
        mix_here = mixer is not None and hook == k
        has_tnet = k in self.tnet_layers
        if has_tnet and self.tnet == "before":
            h = self._tnet(k, h, regs)
        if mix_here:
            # the hooked activation goes first so a feature-dependent mask is
            # built from it; earlier per-point features follow the same rows
            h = mixer(h)
            for j in list(feats):
                feats[j] = mixer(feats[j])
        if has_tnet and self.tnet == "after":
            h = self._tnet(k, h, regs)
        return h

    def _stage(self, k: int, feats: dict, knn_cache: Optional[dict]) -> Tensor:
        p = self.params
        if self.arch == "pointnet-mini" or k == 3:
            inp = feats[k - 1] if self.arch == "pointnet-mini" else ad.concat([feats[1], feats[2]], -1)
            return shared_mlp_forward(inp, p[f"l{k}.w"], p[f"l{k}.b"])
        x = feats[k - 1]
        idx = None if knn_cache is None else knn_cache.get(k)
        if idx is None:
            idx = knn_graph(x.data, self.k_neighbors)
            if knn_cache is not None:
                knn_cache[k] = idx
        return edgeconv_forward(x, p[f"l{k}.w"], p[f"l{k}.b"], self.k_neighbors, idx)

    def forward(self, points: np.ndarray, hook: Optional[int] = None, mixer: Optional[Callable] = None,
                category: Optional[np.ndarray] = None, knn_cache: Optional[dict] = None):
        """Run the network on a B x N x 3 array (or a Tensor, to get input gradients).

        ``mixer`` (e.g. :class:`pmcut.augment.BatchMixer`) is invoked on the
        activations of layer ``hook``; with ``mixer=None`` the pass is the plain
        forward pass. ``category`` is the B x C1 object-class vector fed to the
        segmentation head. Returns ``(logits, reg)`` where ``reg`` is the summed
        T-net regulariser or None when no T-net ran.
        """
        h = points if isinstance(points, Tensor) else Tensor(points)
        if h.ndim != 3 or h.shape[2] != 3:
            raise InvalidInputError(f"points must be B x N x 3, got {h.shape}")
        if mixer is not None and hook not in self.eligible_layers:
            raise InvalidInputError(f"hook layer {hook} is not eligible; choose from {self.eligible_layers}")
        regs: list = []
        feats: dict = {}
        feats[0] = self._at_layer(0, h, {}, hook, mixer, regs)
        for k in (1, 2, 3):
            h = self._stage(k, feats, knn_cache)
            earlier = {j: feats[j] for j in feats if j > 0}
            h = self._at_layer(k, h, earlier, hook, mixer, regs)
            feats.update(earlier)
            feats[k] = h
        glob = max_pool_global(feats[3])
        p = self.params
        if self.task == "cls":
            g = (glob @ p["fc1.w"] + p["fc1.b"]).relu()
            logits = g @ p["fc2.w"] + p["fc2.b"]
        else:
            b, n, _ = h.shape
            if category is None:
                raise InvalidInputError("segmentation forward needs the category vector")
            category = np.asarray(category, dtype=np.float64)
            if category.shape != (b, self.num_classes):
                raise InvalidInputError(f"category must be {b} x {self.num_classes}")
            parts = [ad.broadcast_to(glob.reshape(b, 1, self.EMBED), (b, n, self.EMBED)),
                     feats[1], feats[2],
                     Tensor(np.broadcast_to(category[:, None, :], (b, n, self.num_classes)))]
            x = ad.concat(parts, -1)
            x = shared_mlp_forward(x, p["seg1.w"], p["seg1.b"])
            logits = shared_mlp_forward(x, p["seg2.w"], p["seg2.b"], activation=False)
        reg = None
        for r in regs:
            reg = r if reg is None else reg + r
        return logits, reg

    def predict(self, points: np.ndarray, category: Optional[np.ndarray] = None,
                batch_size: int = 64) -> np.ndarray:
        """Argmax predictions (B for cls, B x N for seg) without building a graph."""
        out = []
        for s in range(0, len(points), batch_size):
            cat = None if category is None else category[s:s + batch_size]
            logits, _ = self.forward(points[s:s + batch_size], category=cat)
            out.append(np.argmax(logits.data, axis=-1))
        return np.concatenate(out)


def build_model(arch: str = "pointnet-mini", **kwargs) -> PointModel:
    return PointModel(arch, **kwargs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PMCM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: PointModel, path) -> None:
    """Write magic, u16 version, u32-prefixed JSON descriptor, then f64 LE tensors."""
    desc = {"model": model.config(),
            "layers": [asdict(s) for s in model.layer_specs()],
            "params": [[name, list(t.data.shape)] for name, t in model.params.tensors.items()]}
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for t in model.params:
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expect_arch: Optional[str] = None, expect_task: Optional[str] = None) -> PointModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(raw) < 10:
        raise CheckpointError("truncated checkpoint header")
    version, dlen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    desc = json.loads(raw[10:10 + dlen].decode("utf-8"))
    cfg = desc["model"]
    if expect_arch is not None and cfg["arch"] != expect_arch:
        raise CheckpointError(f"checkpoint holds {cfg['arch']!r}, requested {expect_arch!r}")
    if expect_task is not None and cfg["task"] != expect_task:
        raise CheckpointError(f"checkpoint was trained for {cfg['task']!r}, requested {expect_task!r}")
    model = PointModel(cfg["arch"], num_classes=cfg["num_classes"], num_parts=cfg["num_parts"],
                       task=cfg["task"], tnet=cfg["tnet"], tnet_layers=cfg["tnet_layers"],
                       k_neighbors=cfg["k_neighbors"], seed=cfg["seed"])
    expected = [[n, list(t.data.shape)] for n, t in model.params.tensors.items()]
    if expected != desc["params"]:
        raise CheckpointError("checkpoint parameter layout does not match its architecture")
    off = 10 + dlen
    need = off + 8 * model.params.size
    if len(raw) != need:
        raise CheckpointError(f"checkpoint payload is {len(raw)} bytes, expected {need}")
    vec = np.frombuffer(raw, dtype="<f8", count=model.params.size, offset=off).astype(np.float64)
    model.params.set_flat(vec)
    return model
