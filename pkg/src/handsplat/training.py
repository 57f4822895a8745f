"""Per-agent state, the forward/backward of one agent, and both training stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .articulated import AGENTS, HANDS, SkinnedTemplate, gaussians_from_mesh, pose_points, pose_points_backward
from .errors import MissingAgent, NonFiniteLoss, NonFiniteSplat, StateMismatch
from .gaussians import GaussianSet, SplatGradients
from .geometry import axis_angle_to_quat, axis_angle_to_quat_backward, quat_multiply, quat_multiply_backward
from . import losses
from .losses import LossReport
from .optim import Adam, OptimConfig, lr_schedule
from .rasterizer import RenderedImage, rasterize, rasterize_backward
from .scene import AgentParams, Scene
from .triplane import DeformedGaussians, MlpHeads, Triplane, deform, triplane_backward

NET_KEYS = ("planes", "w1", "b1", "w2", "b2", "w3", "b3")
FRAME_KEYS = ("phi", "gamma", "theta", "beta")
BACKGROUND = (0.0, 0.0, 0.0)
# the contact distance is measured in meters, like the quoted learning rates
METERS_PER_UNIT = 0.01


@dataclass
class AgentState:
    """Everything optimized for one agent.

    ``params`` holds the splat centers, the network arrays and the per-frame
    (T, k) parameter arrays; the remaining canonical splat attributes in
    ``base`` stay fixed and are modulated by the network.
    """

    agent: str
    template: SkinnedTemplate
    base: GaussianSet
    box_min: np.ndarray
    box_max: np.ndarray
    params: dict
    optimizer: Adam | None = None

    @property
    def n_frames(self) -> int:
        return len(self.params["phi"])

    @property
    def n_lbs(self) -> int:
        return self.template.n_joints + 1 if self.template.is_articulated else 0

    def gaussians(self) -> GaussianSet:
        return self.base.with_(centers=self.params["centers"])

    def network(self) -> tuple[Triplane, MlpHeads]:
        p = self.params
        return (
            Triplane(p["planes"], self.box_min, self.box_max),
            MlpHeads(p["w1"], p["b1"], p["w2"], p["b2"], p["w3"], p["b3"], self.n_lbs),
        )

    def frame_params(self) -> AgentParams:
        p = self.params
        return AgentParams(p["phi"], p["gamma"], p["theta"], p["beta"])

    def new_optimizer(self, config: OptimConfig) -> Adam:
        self.optimizer = Adam(self.params, config.beta1, config.beta2, config.eps)
        return self.optimizer

    def max_scale(self) -> float:
        return 2.0 * self.template.mean_edge_length()

    def copy(self) -> AgentState:
        st = AgentState(self.agent, self.template, self.base, self.box_min.copy(), self.box_max.copy(),
                        {k: v.copy() for k, v in self.params.items()})
        if self.optimizer is not None:
            opt = st.new_optimizer_like(self.optimizer)
            opt.load_state(self.optimizer.state())
        return st

    def new_optimizer_like(self, other: Adam) -> Adam:
        self.optimizer = Adam(self.params, other.beta1, other.beta2, other.eps)
        return self.optimizer


@dataclass
class TrainState:
    agents: dict
    stage: str
    iteration: int
    config: OptimConfig
    history: list = field(default_factory=list)


def _agent_rng(config: OptimConfig, agent: str, *extra) -> np.random.Generator:
    return np.random.default_rng([config.seed, AGENTS.index(agent), *extra])


def make_agent_state(agent: str, template: SkinnedTemplate, params: AgentParams, colors, config: OptimConfig) -> AgentState:
    """Splats on the template vertices plus a freshly initialized network.

    Hand networks are pre-fitted to the template skinning weights so that
    articulation is meaningful from the first iteration.
    """
    if agent not in AGENTS:
        raise MissingAgent(f"unknown agent {agent!r}")
    base = gaussians_from_mesh(template.vertices, template.faces)
    colors = np.broadcast_to(np.asarray(colors, dtype=np.float64), (len(base), 3)).copy()
    base = base.with_(colors=colors)
    rng = _agent_rng(config, agent)
    tp = Triplane.around(template.vertices, rng)
    n_lbs = template.n_joints + 1 if template.is_articulated else 0
    heads = MlpHeads.create(3 * tp.channels, n_lbs, rng)
    p = params.copy()
    state_params = {
        "centers": base.centers.copy(),
        "planes": tp.planes, **heads.params(),
        "phi": p.phi, "gamma": p.gamma, "theta": p.theta, "beta": p.beta,
    }
    state = AgentState(agent, template, base, tp.box_min, tp.box_max, state_params)
    if n_lbs and config.warm_start_iters > 0:
        warm_start(state, config)
    return state


def warm_start(state: AgentState, config: OptimConfig) -> float:
    """Fit the network's skinning head to the template weights; returns the final loss."""
    net = {k: state.params[k] for k in NET_KEYS}
    opt = Adam(net, config.beta1, config.beta2, config.eps)
    lrs = {k: config.warm_start_lr for k in NET_KEYS}
    g = state.gaussians()
    value = float("nan")
    for _ in range(config.warm_start_iters):
        tp, heads = state.network()
        d = deform(g, tp, heads)
        value, g_lbs = losses.lbs_loss(d.lbs_weights, g.centers, state.template, with_grad=True)
        grads = triplane_backward(d, tp, heads, {"lbs_weights": g_lbs})
        opt.step({k: grads[k] for k in NET_KEYS}, lrs)
    return value


def init_agent_state(scene: Scene, agent: str, config: OptimConfig) -> AgentState:
    """Initial state from the scene: base colors are the mean observed color inside the agent masks."""
    total = np.zeros(3)
    count = 0.0
    for f in scene.frames:
        m = f.masks[agent]
        total += (f.image * m[..., None]).sum(axis=(0, 1))
        count += m.sum()
    color = total / count if count else np.full(3, 0.5)
    return make_agent_state(agent, scene.template(agent), scene.init_params[agent], color, config)


# ----------------------------------------------------------------------------
# one agent, one frame


@dataclass
class AgentPose:
    posed: GaussianSet
    cache: object
    q_phi: np.ndarray
    frame: int


def deform_agent(state: AgentState) -> DeformedGaussians:
    tp, heads = state.network()
    return deform(state.gaussians(), tp, heads)


def pose_agent(state: AgentState, deformed: DeformedGaussians, t: int) -> AgentPose:
    p = state.params
    g = deformed.gaussians
    n = len(g)
    weights = deformed.lbs_weights
    assoc = np.arange(n) if state.template.is_articulated else None
    centers, cache = pose_points(state.template, g.centers, weights, assoc,
                                 p["theta"][t], p["beta"][t], p["phi"][t], p["gamma"][t])
    q_phi = axis_angle_to_quat(p["phi"][t])
    quats = quat_multiply(np.broadcast_to(q_phi, (n, 4)), g.rotations)
    return AgentPose(g.with_(centers=centers, rotations=quats), cache, q_phi, t)


def agent_backward(state: AgentState, deformed: DeformedGaussians, pose: AgentPose,
                   splat_grad: SplatGradients, extra: dict | None = None) -> dict:
    """Gradients of every entry of ``state.params``.

    ``splat_grad`` is the cotangent of the posed splats; ``extra`` holds
    direct cotangents on deformed attributes ("lbs_weights", "colors",
    "log_scales").
    """
    extra = extra or {}
    t = pose.frame
    p = state.params
    g = deformed.gaussians
    n = len(g)
    pg = pose_points_backward(pose.cache, splat_grad.centers)
    g_qphi, g_rot = quat_multiply_backward(np.broadcast_to(pose.q_phi, (n, 4)), g.rotations, splat_grad.rotations)
    g_phi = pg["Phi"] + axis_angle_to_quat_backward(p["phi"][t], g_qphi.sum(axis=0))

    dgrads = {
        "centers": pg["points"],
        "rotations": g_rot,
        "log_scales": splat_grad.log_scales + extra.get("log_scales", 0.0),
        "opacity_logits": splat_grad.opacity_logits,
        "colors": splat_grad.colors + extra.get("colors", 0.0),
    }
    if state.n_lbs:
        dgrads["lbs_weights"] = pg["weights"] + extra.get("lbs_weights", 0.0)
    tp, heads = state.network()
    net = triplane_backward(deformed, tp, heads, dgrads)

    out = {k: net[k] for k in NET_KEYS}
    out["centers"] = net["centers"]
    for key in FRAME_KEYS:
        out[key] = np.zeros_like(p[key])
    out["phi"][t] = g_phi
    out["gamma"][t] = pg["Gamma"]
    if state.n_lbs:
        out["theta"][t] = pg["theta"]
        out["beta"][t] = pg["beta"]
    return out


def _add_grads(total: dict, new: dict) -> dict:
    for k, v in new.items():
        total[k] = v if k not in total else total[k] + v
    return total


def render_agents(states: dict, camera, t: int, agents=None, retain: bool = False):
    """Composite render of the given agents at frame ``t``."""
    agents = [a for a in AGENTS if a in states] if agents is None else list(agents)
    sets = []
    for a in agents:
        d = deform_agent(states[a])
        sets.append(pose_agent(states[a], d, t).posed)
    return rasterize(camera, sets, BACKGROUND, retain=retain)


def _image_terms(pred, gt, weights, report: LossReport, mask=None):
    """SSIM and perceptual terms on (optionally masked) images; returns d/d pred."""
    if mask is not None:
        m = mask[..., None]
        pred_m, gt_m = pred * m, gt * m
    else:
        pred_m, gt_m = pred, gt
    v_ssim, g_ssim = losses.ssim_loss(pred_m, gt_m, with_grad=True)
    v_perc, g_perc = losses.perceptual_loss(pred_m, gt_m, with_grad=True)
    report.add("ssim", v_ssim, weights.ssim)
    report.add("perceptual", v_perc, weights.perceptual)
    grad = weights.ssim * g_ssim + weights.perceptual * g_perc
    if mask is not None:
        grad = grad * m
    return grad


def _mask_terms(pred, frame, agents, weights, report: LossReport):
    (fg, bg), (g_fg, g_bg) = losses.mask_loss(
        pred, frame.image, [frame.masks[a] for a in agents], frame.merged, with_grad=True
    )
    report.add("mask_fg", fg, weights.mask_fg)
    report.add("mask_bg", bg, weights.mask_bg)
    return weights.mask_fg * g_fg + weights.mask_bg * g_bg


def single_frame_loss(state: AgentState, deformed: DeformedGaussians, frame, t: int,
                      config: OptimConfig, with_grad: bool = True):
    """Loss of one agent rendered alone against frame ``t``; returns (report, grads)."""
    w = config.weights
    report = LossReport()
    pose = pose_agent(state, deformed, t)
    image = rasterize(frame.camera, [pose.posed], BACKGROUND, retain=with_grad)
    pred = image.rgb
    mask = frame.masks[state.agent]
    g_img = _image_terms(pred, frame.image, w, report, mask)
    g_img = g_img + _mask_terms(pred, frame, [state.agent], w, report)

    extra = {}
    g = deformed.gaussians
    if state.n_lbs:
        v_lbs, g_lbs = losses.lbs_loss(deformed.lbs_weights, g.centers, state.template, with_grad=True)
        report.add("lbs", v_lbs, w.lbs)
        extra["lbs_weights"] = w.lbs * g_lbs
    pairs = losses.neighbor_pairs(g.centers)
    (v_col, v_sc), (g_col, g_sc) = losses.render_reg(g.colors, g.log_scales, pairs, state.max_scale(), with_grad=True)
    report.add("color", v_col, w.color)
    report.add("scale", v_sc, w.scale)
    extra["colors"] = w.color * g_col
    extra["log_scales"] = w.scale * g_sc
    if not with_grad:
        return report, None
    if not report.is_finite():
        return report, None
    splat_grad = rasterize_backward(frame.camera, [pose.posed], g_img, image)[0]
    return report, agent_backward(state, deformed, pose, splat_grad, extra)


def learning_rates(config: OptimConfig, step: int, total: int) -> dict:
    scale = config.spatial_lr_scale
    lrs = {k: config.lr_other for k in NET_KEYS + FRAME_KEYS}
    lrs["gamma"] = config.lr_other * scale
    lrs["centers"] = lr_schedule(step, config, total) * scale
    return lrs


def _batch(rng, n_frames: int, size: int) -> list:
    if size == 0 or size >= n_frames:
        return list(range(n_frames))
    return sorted(rng.choice(n_frames, size=size, replace=False).tolist())


def single_train(scene: Scene, agent: str, config: OptimConfig, state: TrainState | None = None,
                 log=None, checkpoint=None) -> TrainState:
    """Fit one agent alone.

    ``state`` resumes a previous run; ``log`` receives one dict per
    iteration; ``checkpoint`` is called with the final state and, on a
    non-finite loss, with the last good state before raising.
    """
    if agent not in AGENTS:
        raise MissingAgent(f"unknown agent {agent!r}")
    if state is None:
        ast = init_agent_state(scene, agent, config)
        ast.new_optimizer(config)
        state = TrainState({agent: ast}, "single", 0, config)
    else:
        if state.stage != "single" or agent not in state.agents:
            raise StateMismatch(f"checkpoint does not hold a single-stage state for agent {agent!r}")
        ast = state.agents[agent]
        if ast.optimizer is None:
            ast.new_optimizer(config)
        state.config = config
    if ast.n_frames != scene.n_frames:
        raise StateMismatch(f"state has {ast.n_frames} frames, scene has {scene.n_frames}")

    total = config.single_iters
    while state.iteration < total:
        it = state.iteration
        rng = _agent_rng(config, agent, it)
        frames = _batch(rng, scene.n_frames, config.single_batch)
        deformed = deform_agent(ast)
        grads: dict = {}
        report = LossReport()
        for t in frames:
            rep, g = _guarded(single_frame_loss, ast, deformed, scene.frames[t], t, config)
            if g is None:
                _abort(state, checkpoint, it, rep)
            for k, v in rep.terms.items():
                report.add(k, v, rep.weights[k])
            _add_grads(grads, g)
        ast.optimizer.step(grads, learning_rates(config, it, total))
        state.iteration += 1
        row = {"stage": "single", "agent": agent, "iteration": it, "frames": frames, **report.terms, "total": report.total}
        state.history.append(row)
        if log is not None:
            log(row)
    if checkpoint is not None:
        checkpoint(state)
    return state


def _guarded(loss_fn, *args):
    try:
        return loss_fn(*args)
    except NonFiniteSplat as exc:
        report = LossReport()
        report.add(str(exc), float("nan"), 1.0)
        return report, None


def _abort(state, checkpoint, it, report):
    if checkpoint is not None:
        checkpoint(state)
    raise NonFiniteLoss(f"non-finite loss at iteration {it}: {report.terms}")


def joint_frame_loss(states: dict, deformed: dict, frame, t: int, config: OptimConfig):
    """Composite loss of all agents at frame ``t`` (no rendering regularizers)."""
    w = config.weights
    report = LossReport()
    poses = {a: pose_agent(states[a], deformed[a], t) for a in AGENTS}
    sets = [poses[a].posed for a in AGENTS]
    image = rasterize(frame.camera, sets, BACKGROUND, retain=True)
    g_img = _image_terms(image.rgb, frame.image, w, report)
    g_img = g_img + _mask_terms(image.rgb, frame, AGENTS, w, report)
    value, g_contact = losses.contact_loss(
        {a: states[a].params["gamma"][t] * METERS_PER_UNIT for a in AGENTS}, with_grad=True)
    report.add("contact", value, w.contact)
    if not report.is_finite():
        return report, None
    splat_grads = rasterize_backward(frame.camera, sets, g_img, image)
    # only the translations are trained here; posed centers are offset by
    # gamma, so its gradient is the summed center cotangent
    grads = {}
    for a, sg in zip(AGENTS, splat_grads):
        g_gamma = np.zeros_like(states[a].params["gamma"])
        g_gamma[t] = sg.centers.sum(axis=0) + w.contact * METERS_PER_UNIT * g_contact[a][0]
        grads[a] = {"gamma": g_gamma}
    return report, grads


def joint_train(scene: Scene, states: dict, config: OptimConfig, state: TrainState | None = None,
                log=None, checkpoint=None) -> TrainState:
    """Refine the hand translations with every agent rendered together.

    Only translation gradients are formed, and the object's translation is
    masked out of the update, so just the two hand translations change.
    """
    if state is None:
        for a in AGENTS:
            if a not in states:
                raise MissingAgent(f"joint training needs a single-stage state for agent {a!r}")
        agents = {a: states[a].copy() for a in AGENTS}
        for a in AGENTS:
            agents[a].new_optimizer(config)
        state = TrainState(agents, "joint", 0, config)
    else:
        if state.stage != "joint":
            raise StateMismatch("checkpoint does not hold a joint-stage state")
        state.config = config
    agents = state.agents
    for a in AGENTS:
        if agents[a].n_frames != scene.n_frames:
            raise StateMismatch(f"agent {a!r} has {agents[a].n_frames} frames, scene has {scene.n_frames}")
    # networks and centers are frozen, so the deformation is fixed
    deformed = {a: deform_agent(agents[a]) for a in AGENTS}
    masks = {a: {k: (k == "gamma" and a in HANDS) for k in agents[a].params} for a in AGENTS}
    lrs = {k: 0.0 for k in agents["o"].params}
    lrs["gamma"] = config.lr_other * config.spatial_lr_scale

    total = config.n_joint_iters
    while state.iteration < total:
        it = state.iteration
        rng = np.random.default_rng([config.seed, 3, it])
        frames = _batch(rng, scene.n_frames, config.joint_batch)
        grads = {a: {} for a in AGENTS}
        report = LossReport()
        for t in frames:
            rep, g = _guarded(joint_frame_loss, agents, deformed, scene.frames[t], t, config)
            if g is None:
                _abort(state, checkpoint, it, rep)
            for k, v in rep.terms.items():
                report.add(k, v, rep.weights[k])
            for a in AGENTS:
                _add_grads(grads[a], g[a])
        for a in AGENTS:
            agents[a].optimizer.step(grads[a], lrs, masks[a])
        state.iteration += 1
        row = {"stage": "joint", "agent": "lro", "iteration": it, "frames": frames, **report.terms, "total": report.total}
        state.history.append(row)
        if log is not None:
            log(row)
    if checkpoint is not None:
        checkpoint(state)
    return state
