"""Gated recurrent Bayesian filter with learned mismatch compensation.

Three gated units wrap an extended-Kalman recursion: a memory update gate
keeps a Gaussian memory of the state history, a state prediction gate adds a
learned evolution-mismatch mean and (diagonal) covariance to the prediction,
and a state update gate does the same for the observation. Each unit holds
two two-layer tanh networks (mean head and covariance head). With all gates
masked the recursion reduces exactly to the KF/EKF.

Every function here accepts tape Nodes or raw arrays interchangeably, so one
code path serves fast evaluation and end-to-end training.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import linalg
from . import serialize
from .filters import GaussianBelief
from .ssm import NominalModel

# Floor added to every learned covariance diagonal after softplus.
VAR_FLOOR = 1e-6

CHECKPOINT_VERSION = 1
BLOCK_NAMES = ("c1", "c2", "f1", "f2", "h1", "h2")
_FIELDS = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class GateDims:
    """Dimensions of the filter: state, measurement, memory, hidden width."""

    d_x: int
    d_z: int
    d_c: int
    hidden: int = 32

    @classmethod
    def for_model(cls, model: NominalModel, d_c: int | None = None,
                  hidden: int = 32) -> "GateDims":
        # Default memory size: twice the state dimension.
        return cls(model.d_x, model.d_z, d_c if d_c else 2 * model.d_x, hidden)

    def block_io(self, name: str) -> tuple[int, int]:
        if name in ("c1", "c2"):
            return 2 * self.d_c + self.d_x, self.d_c
        if name in ("f1", "f2"):
            return 2 * self.d_c, self.d_x
        if name in ("h1", "h2"):
            return self.d_x, self.d_z
        raise KeyError(name)


@dataclass
class GateBlock:
    """One two-layer network: out = W2 @ tanh(W1 @ i + b1) + b2."""

    W1: object
    b1: object
    W2: object
    b2: object


@dataclass
class GateParams:
    """The six learnable blocks of the three gated units."""

    c1: GateBlock
    c2: GateBlock
    f1: GateBlock
    f2: GateBlock
    h1: GateBlock
    h2: GateBlock

    def blocks(self):
        return [(name, getattr(self, name)) for name in BLOCK_NAMES]

    def flat(self) -> list:
        return [getattr(block, f) for _, block in self.blocks() for f in _FIELDS]

    def tracked(self, tape: ad.Tape) -> "GateParams":
        """Copy with every array registered as a tape leaf."""
        return GateParams(*[
            GateBlock(*[tape.leaf(getattr(block, f)) for f in _FIELDS])
            for _, block in self.blocks()
        ])

    def copy(self) -> "GateParams":
        return GateParams(*[
            GateBlock(*[np.array(getattr(block, f), dtype=float, copy=True)
                        for f in _FIELDS])
            for _, block in self.blocks()
        ])

    def with_flat(self, arrays) -> "GateParams":
        """Rebuild from a flat array list in blocks() x (W1, b1, W2, b2) order."""
        it = iter(arrays)
        return GateParams(*[GateBlock(next(it), next(it), next(it), next(it))
                            for _ in BLOCK_NAMES])


def init_params(dims: GateDims, seed) -> GateParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization, seeded."""
    rng = np.random.default_rng(seed)
    blocks = []
    for name in BLOCK_NAMES:
        n_in, n_out = dims.block_io(name)
        s1 = 1.0 / np.sqrt(n_in)
        s2 = 1.0 / np.sqrt(dims.hidden)
        blocks.append(GateBlock(
            W1=rng.uniform(-s1, s1, size=(dims.hidden, n_in)),
            b1=rng.uniform(-s1, s1, size=dims.hidden),
            W2=rng.uniform(-s2, s2, size=(n_out, dims.hidden)),
            b2=rng.uniform(-s2, s2, size=n_out),
        ))
    return GateParams(*blocks)


def params_dims(params: GateParams) -> tuple[int, int, int]:
    """(d_x, d_z, d_c) implied by the block shapes."""
    d_c = np.shape(ad.value_of(params.c1.b2))[0]
    d_x = np.shape(ad.value_of(params.f1.b2))[0]
    d_z = np.shape(ad.value_of(params.h1.b2))[0]
    return d_x, d_z, d_c


def params_sumsq(params: GateParams):
    """Sum of squared entries over all six blocks (tape-generic)."""
    total = 0.0
    for arr in params.flat():
        total = ad.add(total, ad.sumsq(arr))
    return total


@dataclass
class MemoryState:
    """Gaussian memory: mean vector and the diagonal of its covariance."""

    c_hat: object
    p_c: object


@dataclass(frozen=True)
class GateMask:
    """Ablation switches; a disabled gate contributes nothing to the step."""

    use_mug: bool = True
    use_spg: bool = True
    use_sug: bool = True


ABLATION_SCHEMES = {
    "full": GateMask(True, True, True),
    "no_mug": GateMask(False, True, True),
    "no_spg": GateMask(True, False, True),
    "no_sug": GateMask(True, True, False),
}


@dataclass
class GateOutputs:
    """Per-step gate diagnostics (plain arrays; zeros for masked gates)."""

    delta_f: np.ndarray
    p_f: np.ndarray
    delta_h: np.ndarray
    p_h: np.ndarray


def nn_forward(block: GateBlock, x):
    """Two-layer evaluation W2 @ tanh(W1 @ x + b1) + b2."""
    return ad.dense2(block.W1, block.b1, block.W2, block.b2, x)


def _var_head(block: GateBlock, x):
    """Covariance-diagonal head: softplus of the network output plus a floor."""
    return ad.softplus_shift(nn_forward(block, x), VAR_FLOOR)


def zero_memory(d_c: int) -> MemoryState:
    """Memory used at k=0 and whenever the memory gate is masked."""
    return MemoryState(np.zeros(d_c), np.ones(d_c))


def build_input_mug(mem: MemoryState, x_post):
    """sigmoid(memory mean ++ covariance diagonal) ++ max-normalized state."""
    squashed = ad.sigmoid(ad.concat([mem.c_hat, mem.p_c]))
    return ad.concat([squashed, ad.maxnorm(x_post)])


def build_input_spg(mem: MemoryState):
    """sigmoid(memory mean ++ covariance diagonal)."""
    return ad.sigmoid(ad.concat([mem.c_hat, mem.p_c]))


def build_input_sug(x_pred):
    """Max-normalized predicted state."""
    return ad.maxnorm(x_pred)


def memory_update_gate(params: GateParams, mem_prev: MemoryState, x_post,
                       mask: GateMask) -> MemoryState:
    """New memory from the previous memory and posterior state.

    Masked: returns the constant zero memory, so downstream gate inputs no
    longer depend on the state history.
    """
    if not mask.use_mug:
        return zero_memory(params_dims(params)[2])
    i_c = build_input_mug(mem_prev, x_post)
    return MemoryState(nn_forward(params.c1, i_c), _var_head(params.c2, i_c))


def state_prediction_gate(params: GateParams, belief: GaussianBelief,
                          mem: MemoryState, model: NominalModel,
                          mask: GateMask):
    """Predicted belief with the learned evolution-mismatch compensation.

    mean: f(x) + delta_f;  cov: F P F' + Q + diag(p_f).
    Masked: exact EKF prediction (delta_f = 0, p_f = 0).
    """
    delta_f = p_f = None
    if mask.use_spg:
        i_f = build_input_spg(mem)
        delta_f = nn_forward(params.f1, i_f)
        p_f = _var_head(params.f2, i_f)

    x_pred = model.f(belief.mean)
    if delta_f is not None:
        x_pred = ad.add(x_pred, delta_f)
    F = model.F_jac(belief.mean)
    P_pred = ad.add(ad.sym(ad.matmul(ad.matmul(F, belief.cov), ad.transpose(F))),
                    model.Q)
    if p_f is not None:
        P_pred = ad.add_diag(P_pred, p_f)
    return GaussianBelief(x_pred, P_pred), (delta_f, p_f)


def state_update_gate(params: GateParams, belief_pred: GaussianBelief, z,
                      model: NominalModel, mask: GateMask):
    """Updated belief with the learned observation-mismatch compensation.

    innovation covariance: H P H' + R + diag(p_h); gain applied through SPD
    solves; posterior covariance symmetrized.
    Masked: exact EKF update (delta_h = 0, p_h = 0).
    """
    x_pred, P_pred = belief_pred.mean, belief_pred.cov
    delta_h = p_h = None
    if mask.use_sug:
        i_h = build_input_sug(x_pred)
        delta_h = nn_forward(params.h1, i_h)
        p_h = _var_head(params.h2, i_h)

    z_pred = model.h(x_pred)
    if delta_h is not None:
        z_pred = ad.add(z_pred, delta_h)
    H = model.H_jac(x_pred)
    HP = ad.matmul(H, P_pred)
    P_z = ad.add(ad.sym(ad.matmul(HP, ad.transpose(H))), model.R)
    if p_h is not None:
        P_z = ad.add_diag(P_z, p_h)

    innovation = ad.sub(z, z_pred)
    Pxz = ad.transpose(HP)  # equals P H' for (bitwise) symmetric P
    x_post = ad.add(x_pred, ad.matvec(Pxz, ad.solve_spd(P_z, innovation,
                                                        "innovation covariance")))
    P_post = ad.sym(ad.sub(P_pred, ad.matmul(Pxz, ad.solve_spd(
        P_z, HP, "innovation covariance"))))
    return GaussianBelief(x_post, P_post), (delta_h, p_h), P_z


def filter_step(params: GateParams, model: NominalModel, belief: GaussianBelief,
                mem: MemoryState, z, mask: GateMask):
    """One full recursion step: memory update, prediction, update."""
    mem_next = memory_update_gate(params, mem, belief.mean, mask)
    belief_pred, (delta_f, p_f) = state_prediction_gate(
        params, belief, mem_next, model, mask)
    belief_post, (delta_h, p_h), P_z = state_update_gate(
        params, belief_pred, z, model, mask)

    linalg.audit_cov(ad.value_of(belief_pred.cov), "predicted covariance")
    linalg.audit_cov(ad.value_of(P_z), "innovation covariance")
    linalg.audit_cov(ad.value_of(belief_post.cov), "posterior covariance")
    if mask.use_mug:
        linalg.audit_diag(ad.value_of(mem_next.p_c), "memory covariance")
    if p_f is not None:
        linalg.audit_diag(ad.value_of(p_f), "evolution mismatch covariance")
    if p_h is not None:
        linalg.audit_diag(ad.value_of(p_h), "observation mismatch covariance")

    d_x, d_z, _ = params_dims(params)
    outputs = GateOutputs(
        delta_f=np.asarray(ad.value_of(delta_f)) if delta_f is not None else np.zeros(d_x),
        p_f=np.asarray(ad.value_of(p_f)) if p_f is not None else np.zeros(d_x),
        delta_h=np.asarray(ad.value_of(delta_h)) if delta_h is not None else np.zeros(d_z),
        p_h=np.asarray(ad.value_of(p_h)) if p_h is not None else np.zeros(d_z),
    )
    return belief_post, mem_next, outputs


@dataclass
class FilterRun:
    """Posterior sequence plus per-step diagnostics."""

    means: list
    covs: list
    outputs: list
    memories: list

    def means_array(self) -> np.ndarray:
        return np.stack([np.asarray(ad.value_of(m), dtype=float) for m in self.means])

    def covs_array(self) -> np.ndarray:
        return np.stack([np.asarray(ad.value_of(c), dtype=float) for c in self.covs])


def filter_trajectory(params: GateParams, model: NominalModel, z_seq,
                      init_belief: GaussianBelief, mask: GateMask = GateMask()
                      ) -> FilterRun:
    """Run the gated recursion over measurements k = 1..K.

    Memory starts at the constant zero-memory state. Outputs are Nodes when
    params/inputs are tape-tracked and plain arrays otherwise. Step k only
    consumes step k-1 artifacts.
    """
    d_c = params_dims(params)[2]
    mem = zero_memory(d_c)
    belief = init_belief
    run = FilterRun([], [], [], [])
    for k, z in enumerate(z_seq, start=1):
        try:
            belief, mem, out = filter_step(params, model, belief, mem, z, mask)
        except (linalg.SingularMatrixError, linalg.CovarianceError) as exc:
            raise type(exc)(f"step {k}: {exc}") from None
        run.means.append(belief.mean)
        run.covs.append(belief.cov)
        run.outputs.append(out)
        run.memories.append(MemoryState(np.asarray(ad.value_of(mem.c_hat)),
                                        np.asarray(ad.value_of(mem.p_c))))
    return run


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: GateParams, dims: GateDims) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "dims": {"d_x": dims.d_x, "d_z": dims.d_z, "d_c": dims.d_c,
                 "hidden": dims.hidden},
        "blocks": {
            name: {f: np.asarray(getattr(block, f), dtype=float).tolist()
                   for f in _FIELDS}
            for name, block in params.blocks()
        },
    }
    serialize.dump(payload, path)


def load_checkpoint(path) -> tuple[GateParams, GateDims]:
    payload = serialize.load(path)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    d = payload["dims"]
    dims = GateDims(int(d["d_x"]), int(d["d_z"]), int(d["d_c"]), int(d["hidden"]))
    blocks = []
    for name in BLOCK_NAMES:
        raw = payload["blocks"][name]
        n_in, n_out = dims.block_io(name)
        block = GateBlock(*[np.asarray(raw[f], dtype=float) for f in _FIELDS])
        want = {"W1": (dims.hidden, n_in), "b1": (dims.hidden,),
                "W2": (n_out, dims.hidden), "b2": (n_out,)}
        for f in _FIELDS:
            got = np.shape(getattr(block, f))
            if got != want[f]:
                raise ValueError(f"checkpoint block {name}.{f} has shape {got}, "
                                 f"expected {want[f]}")
            if not np.isfinite(getattr(block, f)).all():
                raise ValueError(f"checkpoint block {name}.{f} has non-finite entries")
        blocks.append(block)
    return GateParams(*blocks), dims
