"""Policy/value network over batched tree observations.

Pipeline per timestep: an MLP encodes each train's attribute vector, a
child-sum TreeLSTM encodes its branch tree bottom-up, the two codes are
concatenated and mixed across trains by self-attention blocks (trains are a
set: no positional encoding), and two heads read out per-train action logits
and values.  The state value is the sum of per-train values.

Branch labels (left/forward/right/back) are appended to node features as a
one-hot before the cell, since pure child-sum aggregation would discard which
way each subtree lies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DomainError, FormatError
from .obs import ATTR_DIM, NODE_FEATURE_DIM, FlatObsBatch, scale_node_features

LABEL_COUNT = 4  # left, forward, right, back
TREE_INPUT_DIM = NODE_FEATURE_DIM + LABEL_COUNT


def canonical_sum(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sum with the addends sorted first, elementwise along `dim`.

    Plain float reduction depends on operand order, so permuting trains (or a
    node's children) could flip low bits.  Sorting makes the reduction order a
    function of the values alone, which turns the permutation symmetries of
    this architecture into bit-exact identities.
    """
    return torch.sort(t, dim=dim).values.sum(dim)


@dataclass(frozen=True)
class NetConfig:
    attr_dim: int = ATTR_DIM
    node_dim: int = NODE_FEATURE_DIM
    mlp_hidden: int = 256
    tree_hidden: int = 256
    attn_heads: int = 8
    ff_dim: int = 1024
    head_hidden: int = 256
    attn_blocks: int = 3
    n_actions: int = 5

    @property
    def attn_dim(self) -> int:
        # concatenated [attribute code, tree code] feeds the attention stack
        return self.mlp_hidden + self.tree_hidden


class TreeLstmCell(nn.Module):
    """Child-sum cell: gates from the input plus summed child states.

    h_tilde = sum_k h_k
    i = sigmoid(W_i x + U_i h_tilde + b_i)
    f_k = sigmoid(W_f x + U_f h_k + b_f)        one forget gate per child
    o = sigmoid(W_o x + U_o h_tilde + b_o)
    u = tanh(W_u x + U_u h_tilde + b_u)
    c = i * u + sum_k f_k * c_k
    h = o * tanh(c)
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_i = nn.Linear(input_dim, hidden_dim)
        self.w_f = nn.Linear(input_dim, hidden_dim)
        self.w_o = nn.Linear(input_dim, hidden_dim)
        self.w_u = nn.Linear(input_dim, hidden_dim)
        self.u_i = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.u_f = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.u_o = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.u_u = nn.Linear(hidden_dim, hidden_dim, bias=False)

    def forward(self, x: torch.Tensor, children=()):
        """One node: x is (input_dim,); children is a sequence of (h, c)."""
        if x.shape[-1] != self.input_dim:
            raise DomainError(
                f"expected input of width {self.input_dim}, got {x.shape[-1]}"
            )
        for h, c in children:
            if h.shape[-1] != self.hidden_dim or c.shape[-1] != self.hidden_dim:
                raise DomainError("child state width does not match hidden_dim")
        if children:
            h_tilde = canonical_sum(torch.stack([h for h, _ in children]), 0)
        else:
            h_tilde = x.new_zeros(self.hidden_dim)
        i = torch.sigmoid(self.w_i(x) + self.u_i(h_tilde))
        o = torch.sigmoid(self.w_o(x) + self.u_o(h_tilde))
        u = torch.tanh(self.w_u(x) + self.u_u(h_tilde))
        c = i * u
        if children:
            terms = torch.stack(
                [
                    torch.sigmoid(self.w_f(x) + self.u_f(h_k)) * c_k
                    for h_k, c_k in children
                ]
            )
            c = c + canonical_sum(terms, 0)
        h = o * torch.tanh(c)
        return h, c


class TreeLstm(nn.Module):
    """Evaluates the cell over a whole node batch, level by level.

    Nodes are processed leaves first (grouped by height), with child sums and
    per-child forget terms accumulated through index_add, so every tree in the
    batch is one fused pass instead of a Python recursion.
    """

    def __init__(self, hidden_dim: int, input_dim: int = TREE_INPUT_DIM):
        super().__init__()
        self.cell = TreeLstmCell(input_dim, hidden_dim)

    def forward(self, node_x: torch.Tensor, levels, edges, roots: torch.Tensor):
        cell = self.cell
        wxi, wxf = cell.w_i(node_x), cell.w_f(node_x)
        wxo, wxu = cell.w_o(node_x), cell.w_u(node_x)
        total = node_x.shape[0]
        h_buf = node_x.new_zeros(total, cell.hidden_dim)
        c_buf = node_x.new_zeros(total, cell.hidden_dim)
        for nodes, kids in zip(levels, edges):
            m, width = kids.shape
            if width:
                # padded child gather; canonical sums keep sibling order out
                # of the float accumulation (padding adds exact zeros)
                mask = (kids >= 0).unsqueeze(-1)
                safe = kids.clamp(min=0).reshape(-1)
                h_kids = h_buf[safe].view(m, width, -1) * mask
                c_kids = c_buf[safe].view(m, width, -1) * mask
                h_sum = canonical_sum(h_kids, 1)
                f_k = torch.sigmoid(wxf[nodes].unsqueeze(1) + cell.u_f(h_kids))
                fc_sum = canonical_sum(f_k * c_kids, 1)
            else:
                h_sum = node_x.new_zeros(m, cell.hidden_dim)
                fc_sum = node_x.new_zeros(m, cell.hidden_dim)
            i = torch.sigmoid(wxi[nodes] + cell.u_i(h_sum))
            o = torch.sigmoid(wxo[nodes] + cell.u_o(h_sum))
            u = torch.tanh(wxu[nodes] + cell.u_u(h_sum))
            c = i * u + fc_sum
            h = o * torch.tanh(c)
            h_buf = h_buf.index_add(0, nodes, h)
            c_buf = c_buf.index_add(0, nodes, c)
        return h_buf[roots]


class SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention over the train axis, then a
    position-wise feed-forward, both with residual connections."""

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        if dim % heads:
            raise DomainError(f"attention width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.proj_q = nn.Linear(dim, dim)
        self.proj_k = nn.Linear(dim, dim)
        self.proj_v = nn.Linear(dim, dim)
        self.proj_out = nn.Linear(dim, dim)
        self.ff_1 = nn.Linear(dim, ff_dim)
        self.ff_2 = nn.Linear(ff_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite values entering attention")
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, n, d = x.shape
        dh = d // self.heads
        y = self.norm1(x)

        def split(t):
            return t.view(b, n, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.proj_q(y)), split(self.proj_k(y)), split(self.proj_v(y))
        # One head at a time, with scores via broadcast products reduced over
        # the feature axis and the train axis reduced canonically: batched
        # matmul picks different accumulation orders per output position,
        # which would break bit-exact train-permutation equivariance.
        heads_out = []
        for hd in range(self.heads):
            qh, kh, vh = q[:, hd], k[:, hd], v[:, hd]
            scores = (qh.unsqueeze(2) * kh.unsqueeze(1)).sum(-1) / (dh**0.5)
            scores = scores - scores.amax(dim=-1, keepdim=True)
            e = torch.exp(scores)
            w = e / canonical_sum(e, -1).unsqueeze(-1)
            heads_out.append(canonical_sum(w.unsqueeze(-1) * vh.unsqueeze(-3), -2))
        mixed = torch.stack(heads_out, dim=1)
        mixed = mixed.transpose(1, 2).reshape(b, n, d)
        x = x + self.proj_out(mixed)
        y = self.norm2(x)
        x = x + self.ff_2(torch.relu(self.ff_1(y)))
        return x.squeeze(0) if squeeze else x


class ScalarHead(nn.Module):
    """Projection to one output via broadcast multiply + reduce.  The gemv
    path behind Linear(dim, 1) accumulates in a row-position-dependent order,
    which would break bit-exact train-permutation equivariance."""

    def __init__(self, dim: int):
        super().__init__()
        self.lin = nn.Linear(dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x * self.lin.weight[0]).sum(-1) + self.lin.bias[0]


@dataclass
class TreeBatch:
    """Collated tensors for one or more timesteps (trains grouped per step)."""

    attr: torch.Tensor  # (steps * n, attr_dim)
    node_x: torch.Tensor  # (total nodes, node_dim + labels)
    levels: list  # per height: node index tensor
    edges: list  # per height: (level size, max kids) child indices, -1 pad
    roots: torch.Tensor  # (steps * n,) root node indices
    restore: torch.Tensor  # (steps, n) gather index back to caller order
    steps: int
    n_agents: int


def _canonical_order(b: FlatObsBatch):
    """Reorder agents by attribute content (lexicographic over the row).

    Row position inside a matmul leaks into the low result bits on common
    BLAS kernels, so feeding agents in caller order would make outputs
    depend on how the caller happened to arrange them.  Sorting to a
    content-defined layout (the id column is unique) makes the entire
    forward pass a function of the observation set alone; `restore` maps
    results back to caller positions.
    """
    order = np.lexsort(b.attr.T[::-1])
    if np.array_equal(order, np.arange(b.n_agents)):
        return b, order
    slices = [b.agent_slice(int(i)) for i in order]
    offsets = np.zeros(len(slices) + 1, dtype=np.int64)
    for j, sl in enumerate(slices):
        offsets[j + 1] = offsets[j] + (sl.stop - sl.start)
    reordered = FlatObsBatch(
        attr=b.attr[order],
        node_feat=np.concatenate([b.node_feat[sl] for sl in slices]),
        parent=np.concatenate([b.parent[sl] for sl in slices]),
        label=np.concatenate([b.label[sl] for sl in slices]),
        offsets=offsets,
    )
    return reordered, order


def collate(batches, width: int, height: int) -> TreeBatch:
    """Tensorize FlatObsBatch(es); all node features are scaled here."""
    if isinstance(batches, FlatObsBatch):
        batches = [batches]
    n = batches[0].n_agents
    if any(b.n_agents != n for b in batches):
        raise DomainError("all batches in a collation must have equal train counts")
    restore = np.zeros((len(batches), n), dtype=np.int64)
    canonical = []
    for s, b in enumerate(batches):
        cb, order = _canonical_order(b)
        canonical.append(cb)
        restore[s, order] = np.arange(n)
    batches = canonical
    attr = np.concatenate([b.attr for b in batches])
    feats, parents, labels, root_idx = [], [], [], []
    base = 0
    for b in batches:
        feats.append(scale_node_features(b.node_feat, n, width, height))
        parents.append(b.parent)
        labels.append(b.label)
        root_idx.extend(int(b.offsets[i]) + base for i in range(b.n_agents))
        base += len(b.node_feat)
    feat = np.concatenate(feats)
    label = np.concatenate(labels)

    total = len(feat)
    node_x = np.zeros((total, TREE_INPUT_DIM), dtype=np.float32)
    node_x[:, :NODE_FEATURE_DIM] = feat
    has_label = label >= 0
    node_x[np.nonzero(has_label)[0], NODE_FEATURE_DIM + label[has_label]] = 1.0

    # global parent pointers, then height of every node (leaves are height 0)
    parent_g = np.full(total, -1, dtype=np.int64)
    base = 0
    for b, par in zip(batches, parents):
        for i in range(b.n_agents):
            sl = b.agent_slice(i)
            local = par[sl].astype(np.int64)
            start = base + sl.start
            block = local + start
            block[local < 0] = -1
            parent_g[start : base + sl.stop] = block
        base += len(b.node_feat)
    heights = np.zeros(total, dtype=np.int64)
    for k in range(total - 1, -1, -1):
        p = parent_g[k]
        if p >= 0 and heights[p] <= heights[k]:
            heights[p] = heights[k] + 1

    levels, edges = [], []
    order = np.argsort(heights, kind="stable")
    bounds = np.searchsorted(heights[order], np.arange(heights.max() + 2))
    pos_in_level = np.empty(total, dtype=np.int64)
    for lv in range(len(bounds) - 1):
        nodes = order[bounds[lv] : bounds[lv + 1]]
        pos_in_level[nodes] = np.arange(len(nodes))
        levels.append(torch.from_numpy(nodes))
    child = np.flatnonzero(parent_g >= 0)
    par_of_child = parent_g[child]
    for lv in range(len(levels)):
        sel = heights[par_of_child] == lv
        ch = child[sel]
        m = len(levels[lv])
        if len(ch):
            pp = pos_in_level[par_of_child[sel]]
            by_parent = np.argsort(pp, kind="stable")
            pp, ch = pp[by_parent], ch[by_parent]
            counts = np.bincount(pp, minlength=m)
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            kids = np.full((m, int(counts.max())), -1, dtype=np.int64)
            kids[pp, np.arange(len(ch)) - starts[pp]] = ch
        else:
            kids = np.zeros((m, 0), dtype=np.int64)
        edges.append(torch.from_numpy(kids))
    return TreeBatch(
        attr=torch.from_numpy(np.ascontiguousarray(attr)),
        node_x=torch.from_numpy(node_x),
        levels=levels,
        edges=edges,
        roots=torch.tensor(root_idx, dtype=torch.int64),
        restore=torch.from_numpy(restore),
        steps=len(batches),
        n_agents=n,
    )


class PolicyNet(nn.Module):
    """Action logits, per-train values, and the summed state value."""

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        h = config.mlp_hidden
        self.attr_mlp = nn.Sequential(
            nn.Linear(config.attr_dim, h),
            nn.ReLU(),
            nn.Linear(h, h),
            nn.ReLU(),
            nn.Linear(h, h),
            nn.ReLU(),
            nn.Linear(h, h),
        )
        self.tree = TreeLstm(config.tree_hidden, config.node_dim + LABEL_COUNT)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(config.attn_dim, config.attn_heads, config.ff_dim)
            for _ in range(config.attn_blocks)
        )
        hh = config.head_hidden
        self.action_head = nn.Sequential(
            nn.Linear(config.attn_dim, hh), nn.ReLU(), nn.Linear(hh, config.n_actions)
        )
        self.value_head = nn.Sequential(
            nn.Linear(config.attn_dim, hh), nn.ReLU(), ScalarHead(hh)
        )

    def forward(self, tb: TreeBatch):
        if tb.attr.shape[-1] != self.config.attr_dim:
            raise DomainError(
                f"attribute width {tb.attr.shape[-1]} != {self.config.attr_dim}"
            )
        h_attr = self.attr_mlp(tb.attr)
        h_tree = self.tree(tb.node_x, tb.levels, tb.edges, tb.roots)
        h = torch.cat([h_attr, h_tree], dim=-1)
        h = h.view(tb.steps, tb.n_agents, -1)
        for block in self.blocks:
            h = block(h)
        logits = self.action_head(h)
        values = self.value_head(h)
        v = canonical_sum(values, -1)
        # back to caller agent order (the net ran in canonical layout)
        logits = torch.gather(
            logits, 1, tb.restore.unsqueeze(-1).expand(-1, -1, logits.shape[-1])
        )
        values = torch.gather(values, 1, tb.restore)
        if tb.steps == 1:
            return logits[0], values[0], v[0]
        return logits, values, v


def build_policy(config: NetConfig = NetConfig(), seed: int | None = None) -> PolicyNet:
    if seed is not None:
        torch.manual_seed(seed)
    return PolicyNet(config)


# -- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"RLCP"
_CKPT_VERSION = 1


def save_checkpoint(path, model: PolicyNet, extra: dict | None = None):
    """Named-tensor container: JSON header (config + extra), then per tensor
    a name, shape, and raw little-endian float32 data.  Round-trips bit-exactly.
    """
    state = model.state_dict()
    meta = {"config": asdict(model.config), "extra": extra or {}}
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    """Returns (NetConfig, extra dict, state dict of float32 tensors)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, meta_len = struct.unpack_from("<4sII", blob)
    except struct.error as exc:
        raise FormatError("truncated checkpoint") from exc
    if magic != _CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cursor = struct.calcsize("<4sII")
    try:
        meta = json.loads(blob[cursor : cursor + meta_len])
        cursor += meta_len
        (n_entries,) = struct.unpack_from("<I", blob, cursor)
        cursor += 4
        state = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", blob, cursor)
            cursor += 2
            name = blob[cursor : cursor + name_len].decode()
            cursor += name_len
            (ndim,) = struct.unpack_from("<B", blob, cursor)
            cursor += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, cursor)
            cursor += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=cursor)
            cursor += count * 4
            state[name] = torch.from_numpy(arr.reshape(shape).copy())
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    config = NetConfig(**meta["config"])
    return config, meta.get("extra", {}), state


def policy_from_checkpoint(path) -> PolicyNet:
    config, _extra, state = load_checkpoint(path)
    model = PolicyNet(config)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise FormatError(f"checkpoint does not match architecture: {exc}") from exc
    return model
