"""Federated round orchestration.

Client sampling, per-algorithm local training (fedavg, fedprox, feddyn,
ditto, fedrod linear/hyper, local-only), weighted aggregation and persistent
per-client state. Everything is a pure function of the configuration and
seeds: client tasks draw from RNGs keyed by (seed, round, client), so results
do not depend on scheduling order even when clients train concurrently.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as datamod
from . import evalmetrics, hyperhead, losses, nnet
from .errors import ConfigurationError
from .evalmetrics import MetricsLog
from .nnet import NetworkSpec, SgdConfig
from .params import ParamVector, save_params

ALGORITHMS = ("fedavg", "fedprox", "feddyn", "ditto", "fedrod", "local")


@dataclass(frozen=True)
class AlgorithmSpec:
    kind: str = "fedavg"
    loss: losses.LossSpec = field(default_factory=losses.LossSpec)
    lam: float = 0.0
    head: str = "linear"       # fedrod variant: linear | hyper
    feddyn_sign: int = -1
    meta_gamma: bool = False

    def __post_init__(self):
        if self.kind not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.kind!r}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be nonnegative")
        if self.head not in ("linear", "hyper"):
            raise ConfigurationError("fedrod head must be 'linear' or 'hyper'")
        if self.feddyn_sign not in (-1, 1):
            raise ConfigurationError("feddyn_sign must be -1 or 1")


@dataclass(frozen=True)
class ExperimentPlan:
    rounds: int = 100
    participation: float = 0.4
    local_epochs: int = 5
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    eval_every: int = 1
    workers: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    meta_eta: float = 0.1
    meta_eps: float = 1e-2
    hyper_hidden: int | None = None

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation must be in (0, 1]")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be >= 1")


@dataclass
class ClientData:
    x: np.ndarray
    y: np.ndarray
    counts: np.ndarray
    dist: np.ndarray

    @property
    def size(self) -> int:
        return len(self.y)


@dataclass
class ClientState:
    last_local: tuple[ParamVector, ParamVector]
    phi: ParamVector | None = None
    ditto: tuple[ParamVector, ParamVector] | None = None
    feddyn_h: tuple[ParamVector, ParamVector] | None = None
    gamma: float | None = None


@dataclass
class ClientResult:
    client: int
    theta: ParamVector
    psi: ParamVector
    nu: ParamVector | None
    state: ClientState
    train_loss: float
    size: int


@dataclass
class FederatedResult:
    log: MetricsLog
    net: NetworkSpec
    algorithm: AlgorithmSpec
    plan: ExperimentPlan
    theta: ParamVector
    psi: ParamVector
    nu: ParamVector | None
    states: dict[int, ClientState]
    clients: dict[int, ClientData]
    distributions: np.ndarray

    def personalized_models(self, client_ids=None) -> list[evalmetrics.Model]:
        ids = sorted(self.clients) if client_ids is None else list(client_ids)
        return [_pfl_model(self, m) for m in ids]


def sample_clients(num_clients: int, fraction: float, master_seed: int,
                   round_index: int, eligible=None) -> list[int]:
    """Seeded uniform sample without replacement of round(fraction * M) ids."""
    pool = sorted(range(num_clients) if eligible is None else eligible)
    if not pool:
        raise ConfigurationError("no eligible clients to sample")
    k = max(1, int(round(fraction * num_clients)))
    k = min(k, len(pool))
    rng = np.random.default_rng([master_seed, round_index])
    picked = rng.choice(len(pool), size=k, replace=False)
    return sorted(pool[i] for i in picked)


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _stack(theta: ParamVector, psi: ParamVector) -> ParamVector:
    layout = tuple((f"ext.{n}", s) for n, s in theta.layout) + \
        tuple((f"head.{n}", s) for n, s in psi.layout)
    return ParamVector(np.concatenate([theta.values, psi.values]), layout)


def _train_generic(net, cd: ClientData, theta, psi, algo: AlgorithmSpec,
                   plan: ExperimentPlan, round_index: int, rng,
                   anchor: tuple[ParamVector, ParamVector] | None,
                   feddyn_h: tuple[ParamVector, ParamVector] | None,
                   loss_spec: losses.LossSpec,
                   personal: dict | None = None) -> tuple:
    """Epochs of minibatch SGD on the generic objective (plus regularizers).

    When ``personal`` is given (fedrod), every batch additionally updates the
    personalized head (linear phi or hypernetwork nu) from the same forward
    pass, without gradients reaching theta or psi.
    """
    sgd = plan.sgd
    m_theta = theta.zeros_like()
    m_psi = psi.zeros_like()
    batch_losses = []
    ce = losses.LossSpec("ce")

    phi = nu = m_phi = m_nu = None
    if personal is not None:
        if personal["mode"] == "linear":
            phi = personal["phi"].copy()
            m_phi = phi.zeros_like()
        else:
            nu = personal["nu"].copy()
            m_nu = nu.zeros_like()
            phi = hyperhead.generate_head(net, nu, cd.dist)

    for _ in range(plan.local_epochs):
        for batch in _epoch_batches(rng, cd.size, sgd.batch_size):
            xb, yb = cd.x[batch], cd.y[batch]
            cache = nnet.forward(net, theta, psi, xb, phi)
            risk, d_g = losses.balanced_risk_and_grad(
                cache.generic_logits, yb, loss_spec, cd.counts)
            batch_losses.append(risk)
            grads = nnet.backward(net, theta, psi, cache, d_g, {"theta", "psi"})
            g_theta, g_psi = grads["theta"], grads["psi"]

            if anchor is not None and algo.lam != 0.0:
                g_theta.values += algo.lam * (theta.values - anchor[0].values)
                g_psi.values += algo.lam * (psi.values - anchor[1].values)
            if feddyn_h is not None:
                g_theta.values += algo.feddyn_sign * feddyn_h[0].values
                g_psi.values += algo.feddyn_sign * feddyn_h[1].values

            d_phi = None
            if personal is not None:
                _, d_p = losses.balanced_risk_and_grad(
                    cache.personal_logits, yb, ce, cd.counts)
                d_phi = nnet.backward(net, theta, psi, cache, d_p, {"phi"},
                                      phi=phi, branch="personal")["phi"]

            theta, m_theta = nnet.sgd_step(theta, g_theta, m_theta, sgd, round_index)
            psi, m_psi = nnet.sgd_step(psi, g_psi, m_psi, sgd, round_index)

            if personal is not None:
                if personal["mode"] == "linear":
                    phi, m_phi = nnet.sgd_step(phi, d_phi, m_phi, sgd, round_index)
                else:
                    g_nu = hyperhead.hyper_backward(net, nu, cd.dist, d_phi)
                    nu, m_nu = nnet.sgd_step(nu, g_nu, m_nu, sgd, round_index)
                    phi = hyperhead.generate_head(net, nu, cd.dist)

    loss_mean = float(np.mean(batch_losses)) if batch_losses else float("nan")
    return theta, psi, phi, nu, loss_mean


def client_update(m: int, cd: ClientData, net: NetworkSpec,
                  global_theta: ParamVector, global_psi: ParamVector,
                  global_nu: ParamVector | None, state: ClientState,
                  algo: AlgorithmSpec, plan: ExperimentPlan,
                  round_index: int,
                  meta_set: tuple[np.ndarray, np.ndarray] | None = None
                  ) -> ClientResult:
    rng = np.random.default_rng([plan.seed, round_index, m])
    loss_spec = algo.loss

    if algo.meta_gamma and meta_set is not None and loss_spec.kind == "bsm":
        gamma = state.gamma if state.gamma is not None else loss_spec.gamma
        batch = rng.permutation(cd.size)[: plan.sgd.batch_size]
        gamma = losses.meta_tune_gamma(
            net, global_theta, global_psi, cd.x[batch], cd.y[batch], cd.counts,
            meta_set[0], meta_set[1], gamma, plan.sgd.lr(round_index),
            plan.meta_eta, plan.meta_eps)
        loss_spec = replace(loss_spec, gamma=gamma)
        state = replace_state(state, gamma=gamma)

    if algo.kind == "local":
        theta0, psi0 = (pv.copy() for pv in state.last_local)
    else:
        theta0, psi0 = global_theta.copy(), global_psi.copy()

    anchor = (global_theta, global_psi) if algo.kind in ("fedprox", "feddyn", "ditto") else None
    feddyn_h = state.feddyn_h if algo.kind == "feddyn" else None

    personal = None
    if algo.kind == "fedrod":
        if algo.head == "linear":
            phi0 = state.phi if state.phi is not None else ParamVector.zeros(nnet.head_layout(net))
            personal = {"mode": "linear", "phi": phi0}
        else:
            personal = {"mode": "hyper", "nu": global_nu.copy()}

    reg_anchor = anchor if algo.kind in ("fedprox", "feddyn") else None
    theta, psi, phi, nu, loss_mean = _train_generic(
        net, cd, theta0, psi0, algo, plan, round_index, rng,
        reg_anchor, feddyn_h, loss_spec, personal)

    new_state = replace_state(state, last_local=(theta, psi))

    if algo.kind == "feddyn":
        h_t = state.feddyn_h[0].copy() if state.feddyn_h else global_theta.zeros_like()
        h_p = state.feddyn_h[1].copy() if state.feddyn_h else global_psi.zeros_like()
        h_t.values += algo.feddyn_sign * algo.lam * (theta.values - global_theta.values)
        h_p.values += algo.feddyn_sign * algo.lam * (psi.values - global_psi.values)
        new_state = replace_state(new_state, feddyn_h=(h_t, h_p))

    if algo.kind == "ditto":
        # personalized branch: continues from its previous value and pulls
        # toward the broadcast global; independent RNG stream so the fedavg
        # side trajectory is untouched
        rng_p = np.random.default_rng([plan.seed, round_index, m, 1])
        if state.ditto is not None:
            pt, pp = (pv.copy() for pv in state.ditto)
        else:
            pt, pp = global_theta.copy(), global_psi.copy()
        ditto_algo = replace(algo, kind="fedprox")
        pt, pp, _, _, _ = _train_generic(
            net, cd, pt, pp, ditto_algo, plan, round_index, rng_p,
            (global_theta, global_psi), None, losses.LossSpec("ce"), None)
        new_state = replace_state(new_state, ditto=(pt, pp))

    if algo.kind == "fedrod" and algo.head == "linear":
        new_state = replace_state(new_state, phi=phi)

    return ClientResult(m, theta, psi, nu, new_state, loss_mean, cd.size)


def replace_state(state: ClientState, **kw) -> ClientState:
    out = ClientState(state.last_local, state.phi, state.ditto, state.feddyn_h, state.gamma)
    for k, v in kw.items():
        setattr(out, k, v)
    return out


def aggregate(contributions: list[tuple[ParamVector, float]]) -> ParamVector:
    """Size-weighted average over the sampled clients' parameters."""
    return nnet.weighted_average(contributions)


def _pfl_model(res_or_ctx, m: int) -> evalmetrics.Model:
    """The model evaluated for client m in the personalized setting."""
    algo = res_or_ctx.algorithm
    state = res_or_ctx.states[m]
    if algo.kind == "fedrod":
        if algo.head == "hyper":
            phi = hyperhead.generate_head(res_or_ctx.net, res_or_ctx.nu,
                                          res_or_ctx.clients[m].dist)
        else:
            phi = state.phi if state.phi is not None else \
                ParamVector.zeros(nnet.head_layout(res_or_ctx.net))
        return (res_or_ctx.theta, res_or_ctx.psi, phi)
    if algo.kind == "ditto" and state.ditto is not None:
        return (state.ditto[0], state.ditto[1], None)
    return (state.last_local[0], state.last_local[1], None)


def build_client_data(train: datamod.Dataset, partition: datamod.Partition,
                      client_ids, poisoned=(), seed: int = 0,
                      meta_indices=None) -> dict[int, ClientData]:
    out = {}
    poisoned = set(poisoned)
    for m in client_ids:
        idx = partition.client_indices[m]
        if meta_indices is not None and len(meta_indices):
            idx, _ = datamod.augment_with_meta(idx, meta_indices, train)
        x = train.features[idx]
        y = train.labels[idx].copy()
        if m in poisoned:
            y = datamod.poison_labels(y, train.num_classes, [seed, 4, m])
        counts = np.bincount(y, minlength=train.num_classes)
        dist = counts / counts.sum() if counts.sum() else counts.astype(float)
        out[m] = ClientData(x, y, counts, dist)
    return out


def run_federated(train: datamod.Dataset, partition: datamod.Partition,
                  test: datamod.Dataset, net: NetworkSpec,
                  algo: AlgorithmSpec, plan: ExperimentPlan,
                  train_clients=None, poisoned=(),
                  meta_set: tuple[np.ndarray, np.ndarray] | None = None,
                  meta_concat_indices=None) -> FederatedResult:
    """Execute the multi-round train/aggregate loop and log metrics."""
    all_ids = range(partition.num_clients) if train_clients is None else train_clients
    eligible = [m for m in all_ids if len(partition.client_indices[m]) > 0]
    if not eligible:
        raise ConfigurationError("every training client is empty")
    clients = build_client_data(train, partition, eligible, poisoned, plan.seed,
                                meta_concat_indices)

    rng_init = np.random.default_rng([plan.seed, 2])
    theta = nnet.init_extractor(net, rng_init)
    psi = nnet.init_head(net, rng_init)
    nu = None
    if algo.kind == "fedrod" and algo.head == "hyper":
        nu = hyperhead.init_hyper(net, rng_init, hidden_dim=plan.hyper_hidden)

    states = {m: ClientState((theta.copy(), psi.copy())) for m in eligible}
    distributions = np.stack([clients[m].dist for m in eligible])
    log = MetricsLog()
    xt, yt = test.features, test.labels

    def pfl_model(m: int) -> evalmetrics.Model:
        if algo.kind == "fedrod":
            if algo.head == "hyper":
                return (theta, psi, hyperhead.generate_head(net, nu, clients[m].dist))
            phi = states[m].phi
            if phi is None:
                phi = ParamVector.zeros(nnet.head_layout(net))
            return (theta, psi, phi)
        if algo.kind == "ditto" and states[m].ditto is not None:
            return (states[m].ditto[0], states[m].ditto[1], None)
        return (states[m].last_local[0], states[m].last_local[1], None)

    def evaluate(round_no: int, train_loss: float) -> None:
        gm = (theta, psi, None)
        correct_g, totals_g = evalmetrics._per_class_counts(net, gm, xt, yt)
        gfl_global = gfl_for_counts(correct_g, totals_g)
        gm_stack = _stack(theta, psi)
        local_accs, local_stacks, pm_counts, pers_sqs = [], [], [], []
        for m in eligible:
            lt, lp = states[m].last_local
            c_l, t_l = evalmetrics._per_class_counts(net, (lt, lp, None), xt, yt)
            local_accs.append(gfl_for_counts(c_l, t_l))
            local_stacks.append(_stack(lt, lp))
            pm = pfl_model(m)
            if pm[0] is lt and pm[1] is lp and pm[2] is None:
                pm_counts.append((c_l, t_l))
            else:
                pm_counts.append(evalmetrics._per_class_counts(net, pm, xt, yt))
            pers_sqs.append(float(np.sum(
                (_stack(pm[0], pm[1]).values - gm_stack.values) ** 2)))
        drift_mean, drift_var = evalmetrics.drift_stats(local_stacks, gm_stack)
        pfl_global = evalmetrics.pfl_accuracy_from_counts(
            [(correct_g, totals_g)] * len(eligible), distributions)
        pfl_personal = evalmetrics.pfl_accuracy_from_counts(pm_counts, distributions)
        log.append(
            round=round_no,
            gfl_global=gfl_global,
            gfl_local_mean=float(np.mean(local_accs)),
            gfl_local_var=float(np.var(local_accs)),
            pfl_global=pfl_global,
            pfl_personal=pfl_personal,
            drift_mean=drift_mean,
            drift_var=drift_var,
            pers_drift_sq_mean=float(np.mean(pers_sqs)),
            train_loss_mean=train_loss,
        )

    evaluate(0, float("nan"))

    for r in range(plan.rounds):
        sampled = sample_clients(partition.num_clients, plan.participation,
                                 plan.seed, r, eligible)
        jobs = [
            (m, clients[m], net, theta, psi, nu, states[m], algo, plan, r, meta_set)
            for m in sampled
        ]
        if plan.workers > 1:
            with ThreadPoolExecutor(max_workers=plan.workers) as pool:
                results = list(pool.map(lambda j: client_update(*j), jobs))
        else:
            results = [client_update(*j) for j in jobs]

        theta = aggregate([(res.theta, res.size) for res in results])
        psi = aggregate([(res.psi, res.size) for res in results])
        if nu is not None:
            nu = aggregate([(res.nu, res.size) for res in results])
        for res in results:
            states[res.client] = res.state
        round_loss = float(np.mean([res.train_loss for res in results]))

        round_no = r + 1
        if round_no % plan.eval_every == 0 or round_no == plan.rounds:
            evaluate(round_no, round_loss)
        if plan.checkpoint_every and plan.checkpoint_dir and \
                (round_no % plan.checkpoint_every == 0 or round_no == plan.rounds):
            _write_checkpoint(plan.checkpoint_dir, round_no, theta, psi, nu, states)

    result = FederatedResult(log, net, algo, plan, theta, psi, nu, states,
                             clients, distributions)
    pms = [pfl_model(m) for m in eligible]
    log.final["cross_client_matrix"] = evalmetrics.cross_client_matrix(
        net, pms, distributions, xt, yt)
    log.final["per_class_recall"] = evalmetrics.per_class_recall(
        net, (theta, psi, None), xt, yt)
    return result


def gfl_for_counts(correct: np.ndarray, totals: np.ndarray) -> float:
    return int(correct.sum()) / int(totals.sum())


def _write_checkpoint(base_dir, round_no, theta, psi, nu, states):
    d = os.path.join(base_dir, f"round_{round_no:04d}")
    os.makedirs(d, exist_ok=True)
    save_params(theta, os.path.join(d, "theta.pv"))
    save_params(psi, os.path.join(d, "psi.pv"))
    if nu is not None:
        save_params(nu, os.path.join(d, "nu.pv"))
    for m, st in states.items():
        if st.phi is not None:
            save_params(st.phi, os.path.join(d, f"client{m}_phi.pv"))
        if st.ditto is not None:
            save_params(st.ditto[0], os.path.join(d, f"client{m}_ditto_theta.pv"))
            save_params(st.ditto[1], os.path.join(d, f"client{m}_ditto_psi.pv"))


def run_experiment(resolved: dict, seed: int,
                   checkpoint_dir: str | None = None) -> FederatedResult:
    """Assemble data, model and plan from a resolved config dict and run."""
    ds = resolved["dataset"]
    if ds["kind"] == "synthetic":
        train, test = datamod.synthetic_train_test(
            ds["classes"], ds["dim"], ds["n_per_class"], ds["test_per_class"],
            ds["separation"], [seed, 0])
    else:
        train = datamod.load_idx(ds["images_path"], ds["labels_path"])
        test = datamod.load_idx(ds["test_images_path"], ds["test_labels_path"])
        c = max(train.num_classes, test.num_classes)
        if train.num_classes != c:
            train = datamod.Dataset(train.features, train.labels, c, train.provenance)
        if test.num_classes != c:
            test = datamod.Dataset(test.features, test.labels, c, test.provenance)

    train = datamod.exponential_imbalance(train, resolved["imbalance_ratio"], [seed, 6])
    partition = datamod.dirichlet_partition(train, resolved["clients"],
                                            resolved["alpha"], seed)

    model = resolved["model"]
    net = NetworkSpec(train.input_dim, tuple(model["hidden_dims"]),
                      model["feature_dim"], train.num_classes)
    loss_cfg = resolved["loss"]
    loss = losses.LossSpec(loss_cfg["kind"], loss_cfg["gamma"], loss_cfg["ir_power"])
    algo = AlgorithmSpec(resolved["algorithm"], loss, resolved["lambda"],
                         resolved["head"], resolved["feddyn_sign"],
                         resolved["meta_gamma"])
    meta_cfg = resolved["meta_set"]
    plan = ExperimentPlan(
        rounds=resolved["rounds"],
        participation=resolved["participation"],
        local_epochs=resolved["local_epochs"],
        sgd=SgdConfig(**resolved["sgd"]),
        seed=seed,
        eval_every=resolved["eval"]["every"],
        workers=resolved["workers"],
        checkpoint_every=resolved["eval"]["checkpoint_every"],
        checkpoint_dir=checkpoint_dir,
        meta_eta=meta_cfg["eta"],
        meta_eps=meta_cfg["eps"],
        hyper_hidden=model["hyper_hidden"] or None,
    )

    meta_set = meta_concat = None
    if meta_cfg["per_class"] > 0:
        meta_idx = datamod.sample_meta_set(train, meta_cfg["per_class"], [seed, 3])
        if algo.meta_gamma:
            meta_set = (train.features[meta_idx], train.labels[meta_idx])
        else:
            # without meta tuning the server-held balanced set is shared with
            # every client as extra training data
            meta_concat = meta_idx

    return run_federated(train, partition, test, net, algo, plan,
                         poisoned=resolved["attack"]["poisoned_clients"],
                         meta_set=meta_set, meta_concat_indices=meta_concat)


def finetune_personal(net: NetworkSpec, theta: ParamVector, psi: ParamVector,
                      phi: ParamVector | None, x: np.ndarray, y: np.ndarray,
                      steps: int, lr: float, seed: int = 0,
                      batch_size: int = 40, full_model: bool = False
                      ) -> tuple[ParamVector, ParamVector, ParamVector | None]:
    """SGD on cross entropy over a client's data to personalize a model.

    By default only the prediction head moves (phi when present, else the
    generic head); full_model updates everything. steps or lr of zero is the
    identity.
    """
    if steps < 0:
        raise ConfigurationError("steps must be >= 0")
    if steps == 0 or lr == 0.0:
        return theta, psi, phi
    rng = np.random.default_rng([seed, 5])
    ce = losses.LossSpec("ce")
    counts = np.bincount(np.asarray(y, dtype=np.intp), minlength=net.num_classes)
    sgd = SgdConfig(lr0=lr, lr_round_decay=1.0, momentum=0.0, weight_decay=0.0,
                    batch_size=batch_size)
    theta, psi = theta.copy(), psi.copy()
    phi = phi.copy() if phi is not None else None
    m_t, m_p = theta.zeros_like(), psi.zeros_like()
    m_phi = phi.zeros_like() if phi is not None else None
    done = 0
    while done < steps:
        for batch in _epoch_batches(rng, len(y), batch_size):
            if done >= steps:
                break
            xb, yb = x[batch], np.asarray(y)[batch]
            cache = nnet.forward(net, theta, psi, xb, phi)
            logits = cache.personal_logits if phi is not None else cache.generic_logits
            _, d_l = losses.balanced_risk_and_grad(logits, yb, ce, counts)
            if full_model:
                groups = {"theta", "psi"} | ({"phi"} if phi is not None else set())
                branch = "personal" if phi is not None else "generic"
                grads = nnet.backward(net, theta, psi, cache, d_l, groups,
                                      phi=phi, branch=branch)
                theta, m_t = nnet.sgd_step(theta, grads["theta"], m_t, sgd, 0)
                psi, m_p = nnet.sgd_step(psi, grads["psi"], m_p, sgd, 0)
                if phi is not None:
                    phi, m_phi = nnet.sgd_step(phi, grads["phi"], m_phi, sgd, 0)
            elif phi is not None:
                g = nnet.backward(net, theta, psi, cache, d_l, {"phi"},
                                  phi=phi, branch="personal")["phi"]
                phi, m_phi = nnet.sgd_step(phi, g, m_phi, sgd, 0)
            else:
                g = nnet.backward(net, theta, psi, cache, d_l, {"psi"})["psi"]
                psi, m_p = nnet.sgd_step(psi, g, m_p, sgd, 0)
            done += 1
    return theta, psi, phi
