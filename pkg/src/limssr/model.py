"""End-to-end wiring: projection -> sequence assembly -> backbone -> fusion -> dual-path head.

Ablation switches live on :class:`ModelConfig`; :func:`apply_ablation`
turns them into a concrete :class:`Wiring` that the forward pass follows.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pcmi
from .backbone import Backbone, BackboneConfig
from .lmrf import RoleWeights
from .mda import MDA
from .numerics.nn import ADAPTER, AUX, BASE, EMBEDDING, HEAD, Module
from .numerics.rng import make_rng
from .numerics.tensor import Tensor, add, concat, gather_rows, matmul, mean, mul, reshape, tsum
from .pcmi import MODALITIES, SpecialVocab
from .projection import Projection


class AblationError(ValueError):
    pass


@dataclass
class ModelConfig:
    dims: dict = field(default_factory=lambda: {"v": 16, "f": 16, "a": 16})
    T: int = 8
    K: int = 4
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    lora_targets: tuple = ("q", "k", "v", "o")
    backbone_dropout: float = 0.0
    dropout_rate: float = 0.15
    mda_hidden: int = 0  # 0 -> model_dim
    mda_heads: int = 4
    lambda_m_init: float = 0.6
    lambda_syn_init: float = 0.7
    prompt_variant: str = "full"
    special_tokens: bool = True
    use_backbone: bool = True
    use_pcmi: bool = True
    use_lmrf: bool = True
    use_mda: bool = True
    path1_only: bool = False
    path2_only: bool = False
    full_finetune: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        self.dims = {m: int(self.dims[m]) for m in MODALITIES}


@dataclass
class Wiring:
    """Resolved forward-pass plan for one ablation setting."""

    prompt: tuple  # (clauses, hide)
    missing_fill: str  # "token" | "zero"
    boundaries: bool
    seq_K: int  # fusion tokens actually placed in the sequence
    z_main: str  # "fusion" | "content_pool"
    head: str  # "dual" | "path1" | "path2" | "average" | "baseline"
    use_backbone: bool

    @property
    def has_fusion(self):
        return self.seq_K > 0


def apply_ablation(cfg):
    """Translate ablation flags into a :class:`Wiring`.

    * ``use_pcmi=False``: zero-filled missing blocks, imputation clause dropped
    * ``use_lmrf=False``: no fusion tokens or fusion clause; z_main pools all
      non-prompt hidden states
    * ``use_mda=False``: plain average of the two heads, no gate/calibration
    * ``path1_only`` / ``path2_only``: single head
    * ``use_backbone=False``: attention over projected features + regressor
    """
    if cfg.path1_only and cfg.path2_only:
        raise AblationError("path1_only and path2_only are mutually exclusive")
    if not cfg.use_mda and (cfg.path1_only or cfg.path2_only):
        raise AblationError("use_mda=False (simple average) conflicts with a path-only flag")
    if not cfg.use_backbone:
        if cfg.path1_only or cfg.path2_only or not cfg.use_mda:
            raise AblationError("the backbone-free baseline has a single head; drop the path/mda flags")
        return Wiring(((), False), "zero", False, 0, "content_pool", "baseline", False)
    drop = []
    if not cfg.use_pcmi:
        drop.append("task")
    fusion_tokens = cfg.use_lmrf and cfg.special_tokens
    if not cfg.use_lmrf:
        drop.append("fusion")
    prompt = pcmi.resolve_prompt(cfg.prompt_variant, drop)
    if cfg.path1_only:
        head = "path1"
    elif cfg.path2_only:
        head = "path2"
    elif not cfg.use_mda:
        head = "average"
    else:
        head = "dual"
    return Wiring(
        prompt=prompt,
        missing_fill="token" if cfg.use_pcmi else "zero",
        boundaries=cfg.special_tokens,
        seq_K=cfg.K if fusion_tokens else 0,
        z_main="fusion" if fusion_tokens else "content_pool",
        head=head,
        use_backbone=True,
    )


class LIMSSR(Module):
    def __init__(self, cfg):
        self.cfg = cfg
        self.wiring = apply_ablation(cfg)
        dtype = np.dtype(cfg.dtype)
        rng = make_rng(cfg.seed, "init")
        self.vocab = SpecialVocab(max(cfg.K, 1))
        self._layouts = {}
        self._pool_cache = {}
        d = cfg.model_dim
        self.projection = Projection(rng, cfg.dims, d, dropout_rate=cfg.dropout_rate, dtype=dtype)
        max_len = self._max_seq_len()
        bcfg = BackboneConfig(
            num_layers=cfg.num_layers,
            num_heads=cfg.num_heads,
            model_dim=d,
            ffn_dim=cfg.ffn_dim,
            vocab_size=len(self.vocab),
            max_seq_len=max_len,
            dropout_rate=cfg.backbone_dropout,
            lora_rank=cfg.lora_rank,
            lora_alpha=cfg.lora_alpha,
            lora_dropout=cfg.lora_dropout,
            lora_targets=cfg.lora_targets,
        )
        self.backbone = Backbone(bcfg, rng, dtype)
        self.role = RoleWeights(max(cfg.K, 1), dtype=dtype)
        self.mda = MDA(
            rng,
            d,
            hidden=cfg.mda_hidden or d,
            num_heads=cfg.mda_heads,
            dropout_rate=cfg.dropout_rate,
            lambda_m=cfg.lambda_m_init,
            lambda_syn=cfg.lambda_syn_init,
            dtype=dtype,
        )
        self.apply_partition()

    # -- structure ---------------------------------------------------------------

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def _max_seq_len(self):
        w = self.wiring
        return max(self.layout(m).seq_len for m in pcmi.all_masks()) if w.use_backbone else 1

    def layout(self, mask):
        mask = pcmi.validate_mask(mask)
        lay = self._layouts.get(mask)
        if lay is None:
            w = self.wiring
            ids = pcmi.build_prompt(mask, w.prompt, self.vocab)
            lay = pcmi.make_layout(mask, self.cfg.T, w.seq_K, ids, w.boundaries)
            self._layouts[mask] = lay
        return lay

    def _pools(self, layout):
        """Cached (modality pooling, content pooling) matrices for a layout."""
        hit = self._pool_cache.get(layout.mask)
        if hit is None:
            hit = (pcmi.pool_matrix(layout, self.dtype), pcmi.content_pool_matrix(layout, self.dtype))
            self._pool_cache[layout.mask] = hit
        return hit

    def trainable_partition(self):
        """{'adapters', 'token_embeddings', 'head', 'aux_modules', 'frozen'} -> parameter names."""
        part = {"adapters": [], "token_embeddings": [], "head": [], "aux_modules": [], "frozen": []}
        key = {ADAPTER: "adapters", EMBEDDING: "token_embeddings", HEAD: "head", AUX: "aux_modules"}
        for name, p in self.named_parameters().items():
            if p.group == BASE and not self.cfg.full_finetune:
                part["frozen"].append(name)
            elif p.group == BASE:
                part["aux_modules"].append(name)
            else:
                part[key[p.group]].append(name)
        return part

    def apply_partition(self):
        frozen = set(self.trainable_partition()["frozen"])
        for name, p in self.named_parameters().items():
            p.requires_grad = name not in frozen

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # -- forward -------------------------------------------------------------------

    def forward(self, ds, index, train=False, rng=None, masks=None):
        """Predict normalised scores for samples ``index`` of dataset ``ds``.

        Only features of available modalities are read (``ds.modality_rows``
        enforces it).  Returns a dict with ``y_hat`` (B,), ``y_main``,
        ``y_aux`` (None for single-path wirings) and ``H_fusion`` (B, K, D)
        or None.
        """
        index = np.asarray(index, dtype=np.int64)
        masks = ds.masks[index] if masks is None else np.asarray(masks)
        proj = self.project(ds, index, masks, train, rng)
        if not self.wiring.use_backbone:
            return self._baseline(proj, masks, train, rng)
        H, layouts = self.encode(proj, masks, train, rng)
        return self.heads(H, layouts, masks, train, rng)

    __call__ = forward

    # The three stages below are exposed separately so callers (the gradient
    # check in particular) can cache upstream activations.

    def project(self, ds, index, masks, train=False, rng=None):
        """{modality: (n_m * T, D)} projected rows of the samples that have it."""
        T, D = self.cfg.T, self.cfg.model_dim
        proj = {}
        for j, m in enumerate(MODALITIES):
            rows = index[masks[:, j] == 1]
            if rows.size == 0:
                continue
            X = ds.modality_rows(rows, m).astype(self.dtype)
            out = self.projection.project(X, m, train, rng)
            proj[m] = reshape(out, (rows.size * T, D))
        return proj

    def assemble(self, proj, masks):
        """(B, S, D) input sequences and their layouts."""
        layouts = [self.layout(mk) for mk in masks]
        seq = pcmi.assemble_batch(proj, layouts, self.vocab, self.backbone.token_embedding, self.wiring.missing_fill)
        return seq, layouts

    def encode(self, proj, masks, train=False, rng=None):
        """Assemble the batch of sequences and run the backbone -> (H, layouts)."""
        seq, layouts = self.assemble(proj, masks)
        return self.backbone(seq, train, rng), layouts

    def heads(self, H, layouts, masks, train=False, rng=None):
        w = self.wiring
        dtype = self.dtype
        B, D = H.shape[0], self.cfg.model_dim
        fm = np.asarray(masks).astype(dtype)
        H_fusion = pcmi.batch_fusion(H, layouts) if w.has_fusion else None
        if w.z_main == "fusion":
            z_main = self.role(H_fusion)
        else:
            z_main = reshape(pcmi.batch_pool(H, [self._pools(l)[1] for l in layouts]), (B, D))
        H_stack = pcmi.batch_pool(H, [self._pools(l)[0] for l in layouts])

        out = {"H_fusion": H_fusion, "H_stack": H_stack, "z_main": z_main}
        mda = self.mda
        if w.head in ("dual", "path1"):
            z_t, g = mda.calibrate(z_main, fm, return_gate=True)
            out["gate"] = g
            y_main = mda.head_sem(z_t, train, rng)
        if w.head in ("dual", "path2"):
            z_aux, parts = mda.pattern_recover(H_stack, fm, return_parts=True)
            out.update(parts)
            y_aux = mda.head_dyn(z_aux, train, rng)
        if w.head == "dual":
            lam = mda.lambda_syn
            y_hat = add(mul(lam, y_main), mul(add(mul(lam, -1.0), 1.0), y_aux))
        elif w.head == "path1":
            y_hat, y_aux = y_main, None
        elif w.head == "path2":
            y_hat, y_main = y_aux, None
        else:  # average: no calibration, no gating
            y_main = mda.head_sem(z_main, train, rng)
            z_aux = mean(mda.attn(H_stack), axis=-2)
            y_aux = mda.head_dyn(z_aux, train, rng)
            y_hat = mul(add(y_main, y_aux), 0.5)
        out.update(y_hat=y_hat, y_main=y_main, y_aux=y_aux)
        return out


    def _baseline(self, proj, masks, train, rng):
        """Cross-modal attention over time-pooled projected features, then a regressor."""
        B, T, D = len(masks), self.cfg.T, self.cfg.model_dim
        fm = masks.astype(self.dtype)
        parts = [Tensor(np.zeros((1, D), dtype=self.dtype))]
        offset, cursor = {}, 1
        for m in MODALITIES:
            if m in proj:
                pooled = mean(reshape(proj[m], (-1, T, D)), axis=1)
                offset[m] = cursor
                cursor += pooled.shape[0]
                parts.append(pooled)
        bank = concat(parts, axis=0)
        seen = {m: 0 for m in MODALITIES}
        idx = np.zeros((B, 3), dtype=np.int64)
        for b in range(B):
            for j, m in enumerate(MODALITIES):
                if masks[b, j]:
                    idx[b, j] = offset[m] + seen[m]
                    seen[m] += 1
        stack = gather_rows(bank, idx)
        att = self.mda.attn(stack, key_mask=masks)
        weights = fm / fm.sum(axis=1, keepdims=True)
        z = reshape(matmul(Tensor(weights.reshape(B, 1, 3)), att), (B, D))
        y = self.mda.head_sem(z, train, rng)
        return {"y_hat": y, "y_main": y, "y_aux": None, "H_fusion": None}

    # -- diagnostics ----------------------------------------------------------------

    def role_weights(self):
        w = self.role.w_role.data
        e = np.exp(w - w.max())
        return (e / e.sum()).tolist()

    def scalar_state(self):
        gam = 1.0 / (1.0 + np.exp(-self.mda.lambda_m.data))
        return {
            "lambda_syn": float(self.mda.lambda_syn.data),
            "lambda_m": self.mda.lambda_m.data.tolist(),
            "gamma_m": gam.tolist(),
            "role_weights": self.role_weights(),
        }


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LIMSSRCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def model_config_dict(cfg):
    d = asdict(cfg)
    d["lora_targets"] = list(cfg.lora_targets)
    return d


def save_checkpoint(model, path, extra=None):
    """Versioned header, JSON config block, then named float64 LE tensors."""
    header = json.dumps({"model": model_config_dict(model.cfg), "extra": extra or {}}, sort_keys=True).encode()
    tensors = [(name, p.data) for name, p in model.named_parameters().items()]
    tensors += [("buffer:" + name, b) for name, b in model.named_buffers().items()]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return (header dict, {name: float64 array}) without building a model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a LIMSSR checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(blob[pos : pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return header, tensors


def load_checkpoint(path):
    header, tensors = read_checkpoint(path)
    mc = dict(header["model"])
    model = LIMSSR(ModelConfig(**mc))
    params = model.named_parameters()
    buffers = model.named_buffers()
    expected = set(params) | {"buffer:" + b for b in buffers}
    if set(tensors) != expected:
        diff = sorted(set(tensors) ^ expected)[:5]
        raise CheckpointError(f"{path}: tensor names do not match the model ({diff} ...)")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {p.shape}")
        p.data[...] = arr
    for name in buffers:
        model.set_buffer(name, tensors["buffer:" + name])
    return model, header.get("extra", {})
