"""Phase 2: the four-player adversarial game.

A generator maps continuous-discrete codes to data space, a critic scores
real against generated batches (with an input-gradient penalty), and an
encoder inverts generation for clustering. The frozen Phase-1 prior supplies
the categorical codes: each real mini-batch is pushed through it and the
hard assignments become the generator's class codes. Five encoder-side
losses (cyclic categorical, cyclic continuous, real reconstruction,
prior-bounded categorical, cross-modality) are individually toggleable for
ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evaluation, latent
from .autodiff import Tensor
from .errors import ConfigError, ContractError, TrainingError
from .nn import AdamState
from .prior import hard_assignments

GAN_KINDS = ("wasserstein-gp", "vanilla")

# probability floor for the vanilla-mode log terms
_P_FLOOR = 1e-12


@dataclass
class LossToggles:
    ce: bool = True
    mse: bool = True
    rec: bool = True
    pce: bool = True
    cm: bool = True


@dataclass
class TrainConfig:
    alpha_cl: float = 10.0  # cyclic categorical weight
    alpha_mse: float = 10.0  # cyclic continuous weight
    alpha_re: float = 1.0  # reconstruction weight
    alpha_pcl: float = 10.0  # prior-bounded categorical weight
    alpha_cm: float = 1.0  # cross-modality weight
    lambda_gp: float = 10.0
    critic_iters: int = 1
    epochs: int = 200
    batch: int = 30
    sigma: float = 0.1
    gan_kind: str = "wasserstein-gp"
    gp_center: float = 0.0
    toggles: LossToggles = field(default_factory=LossToggles)
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    uniform_prior: bool = False
    strict_adversarial_sign: bool = False
    eval_every: int = 1

    def validate(self):
        weights = (self.alpha_cl, self.alpha_mse, self.alpha_re, self.alpha_pcl, self.alpha_cm)
        if any(w < 0 for w in weights) or self.lambda_gp < 0:
            raise ConfigError("gan: loss weights must be non-negative")
        if self.batch < 2:
            raise ConfigError(f"gan.batch must be at least 2, got {self.batch}")
        if self.critic_iters < 1 or self.epochs < 0:
            raise ConfigError("gan: critic_iters >= 1 and epochs >= 0 required")
        if self.sigma <= 0:
            raise ConfigError(f"gan.sigma must be positive, got {self.sigma}")
        if self.gan_kind not in GAN_KINDS:
            raise ConfigError(f"gan.gan_kind must be one of {GAN_KINDS}")
        if self.eval_every < 1:
            raise ConfigError("gan.eval_every must be at least 1")


@dataclass
class StepReport:
    d_loss: float
    g_loss: float
    e_loss: float
    j_ce: float
    j_mse: float
    j_rec: float
    j_pce: float
    j_cm: float
    gp: float
    adv_g: float  # the generator's adversarial term alone

    def values(self):
        return [
            self.d_loss, self.g_loss, self.e_loss, self.j_ce, self.j_mse,
            self.j_rec, self.j_pce, self.j_cm, self.gp, self.adv_g,
        ]


@dataclass
class EpochMetrics:
    epoch: int
    d_loss: float
    g_loss: float
    e_loss: float
    j_ce: float
    j_mse: float
    j_rec: float
    j_pce: float
    j_cm: float
    gp: float
    acc: float | None
    nmi: float | None


@dataclass
class GanNets:
    generator: object
    discriminator: object
    encoder: object
    prior: object | None = None


def _mean_ce(targets, logits):
    logp = ad.log_softmax(logits)
    return ad.mul(ad.sum_all(ad.mul_const(logp, targets)), -1.0 / targets.shape[0])


def loss_ce(z_codes, enc_logits):
    """Mean categorical cross-entropy between one-hot codes and logits."""
    z_codes = np.asarray(z_codes, dtype=np.float64)
    if z_codes.shape != enc_logits.shape:
        raise ContractError(
            f"loss_ce: codes {z_codes.shape} vs logits {enc_logits.shape}"
        )
    return _mean_ce(z_codes, enc_logits)


def loss_mse(z_n, enc_cont):
    """Mean squared error between continuous codes and the continuous head."""
    z_n = np.asarray(z_n, dtype=np.float64)
    if z_n.shape != enc_cont.shape:
        raise ContractError(f"loss_mse: codes {z_n.shape} vs head {enc_cont.shape}")
    return ad.mean_all(ad.square(ad.add_const(enc_cont, -z_n)))


def loss_rec(x_r, encoder, generator):
    """Round-trip error of real data through encoder then generator.

    The categorical head is fed to the generator as softmax probabilities so
    the path stays differentiable.
    """
    x_r = np.asarray(x_r, dtype=np.float64)
    width = encoder.layer_dims[-1]
    if generator.layer_dims[0] != width:
        raise ContractError(
            f"loss_rec: generator input width {generator.layer_dims[0]} "
            f"!= encoder output width {width}"
        )
    cont, logits = encoder.forward_heads(x_r)
    x_hat = generator(ad.concat_cols([cont, ad.softmax(logits)]))
    return ad.mean_all(ad.square(ad.add_const(x_hat, -x_r)))


def loss_pce(z_codes, enc_logits):
    """Prior-bounded categorical loss on real data; same form as loss_ce."""
    return loss_ce(z_codes, enc_logits)


def loss_cm(x_g, x_g2):
    """Mean squared error between two generated batches."""
    if x_g.shape != x_g2.shape:
        raise ContractError(f"loss_cm: batches {x_g.shape} vs {x_g2.shape}")
    return ad.mean_all(ad.square(ad.sub(x_g, x_g2)))


def gradient_penalty(disc, x_r, x_g, lambda_gp, center=0.0, rng=None):
    """Penalty on the critic's input-gradient norm at interpolated points.

    Differentiable with respect to the critic parameters via the recorded
    backward pass. With center 0 the squared norm is used directly (equal in
    value, and avoids the sqrt derivative at an exactly-zero gradient).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x_r = np.asarray(x_r, dtype=np.float64)
    x_g = np.asarray(x_g, dtype=np.float64)
    if x_r.shape != x_g.shape:
        raise ContractError(f"gradient_penalty: batches {x_r.shape} vs {x_g.shape}")
    alpha = rng.uniform(size=(x_r.shape[0], 1))
    mixed = Tensor(alpha * x_r + (1.0 - alpha) * x_g, requires_grad=True)
    grad = ad.input_gradient(disc, mixed)
    sq_norms = ad.row_sums(ad.square(grad))
    if center == 0.0:
        per_sample = sq_norms
    else:
        norms = ad.sqrt(ad.add_const(sq_norms, 1e-12))
        per_sample = ad.square(ad.add_const(norms, -center))
    return ad.mul(ad.mean_all(per_sample), lambda_gp)


def generate_class_batch(generator, class_index, count, d_n, num_classes, sigma, rng):
    """Samples conditioned on one class, off the tape."""
    code = latent.sample_latent(count, d_n, num_classes, sigma, [class_index] * count, rng)
    with ad.no_grad():
        return generator(code.concat()).data


class Trainer:
    """Owns the four networks and their optimizers for one training run."""

    def __init__(self, nets, config, seed=0):
        config.validate()
        self.nets = nets
        self.config = config
        self.rng = np.random.default_rng(seed)
        if nets.encoder.head_split is None:
            raise ContractError("encoder must declare a head split")
        self.d_n = nets.encoder.head_split
        self.num_classes = nets.encoder.layer_dims[-1] - self.d_n
        if nets.generator.layer_dims[0] != self.d_n + self.num_classes:
            raise ContractError(
                f"generator input width {nets.generator.layer_dims[0]} != "
                f"d_n + M = {self.d_n + self.num_classes}"
            )
        if not config.uniform_prior and nets.prior is None:
            raise ContractError("learned-prior training requires a prior network")
        c = config
        self.adam_d = AdamState(nets.discriminator.params, lr=c.lr, beta1=c.beta1, beta2=c.beta2)
        self.adam_g = AdamState(nets.generator.params, lr=c.lr, beta1=c.beta1, beta2=c.beta2)
        self.adam_e = AdamState(nets.encoder.params, lr=c.lr, beta1=c.beta1, beta2=c.beta2)

    # -- latent plumbing -----------------------------------------------------

    def _class_codes(self, x_r):
        if self.config.uniform_prior:
            return "uniform"
        return hard_assignments(self.nets.prior, x_r)

    def _critic_scores(self, batch):
        out = self.nets.discriminator(batch)
        if self.config.gan_kind == "vanilla":
            out = ad.sigmoid(out)
        return out

    # -- one optimization step -----------------------------------------------

    def step(self, x_r):
        c = self.config
        nets = self.nets
        n = x_r.shape[0]

        d_loss_val = gp_val = 0.0
        code = None
        for _ in range(c.critic_iters):
            code = latent.sample_latent(
                n, self.d_n, self.num_classes, c.sigma, self._class_codes(x_r), self.rng
            )
            with ad.no_grad():
                x_g = nets.generator(code.concat()).data
            scores_r = self._critic_scores(x_r)
            scores_g = self._critic_scores(x_g)
            if c.gan_kind == "wasserstein-gp":
                d_total = ad.sub(ad.mean_all(scores_g), ad.mean_all(scores_r))
            else:
                real_term = ad.mean_all(ad.log(ad.add_const(scores_r, _P_FLOOR)))
                fake_term = ad.mean_all(
                    ad.log(ad.add_const(ad.neg(scores_g), 1.0 + _P_FLOOR))
                )
                d_total = ad.neg(ad.add(real_term, fake_term))
            gp = None
            if c.lambda_gp > 0:
                gp = gradient_penalty(
                    nets.discriminator, x_r, x_g, c.lambda_gp, c.gp_center, self.rng
                )
                d_total = ad.add(d_total, gp)
            grads = ad.backward(d_total, nets.discriminator.param_list())
            self.adam_d.step(grads)
            d_loss_val = d_total.item()
            gp_val = gp.item() if gp is not None else 0.0

        # generator and encoder terms share one recorded graph; both gradient
        # maps are taken before either update so saved values stay valid
        x_g = nets.generator(Tensor(code.concat()))
        enc_cont_g, enc_logits_g = nets.encoder.forward_heads(x_g)

        terms = {}
        if c.toggles.ce:
            terms["ce"] = loss_ce(code.z_M, enc_logits_g)
        if c.toggles.mse:
            terms["mse"] = loss_mse(code.z_n, enc_cont_g)

        need_real_heads = c.toggles.rec or c.toggles.cm or (c.toggles.pce and not c.uniform_prior)
        if need_real_heads:
            cont_r, logits_r = nets.encoder.forward_heads(x_r)
        if c.toggles.rec:
            x_back = nets.generator(ad.concat_cols([cont_r, ad.softmax(logits_r)]))
            terms["rec"] = ad.mean_all(ad.square(ad.add_const(x_back, -x_r)))
        if c.toggles.pce and not c.uniform_prior:
            prior_codes = latent.one_hot_rows(
                hard_assignments(nets.prior, x_r), self.num_classes
            )
            terms["pce"] = loss_pce(prior_codes, logits_r)
        if c.toggles.cm:
            z_n2 = self.rng.normal(0.0, c.sigma, size=(n, self.d_n))
            x_g2 = nets.generator(
                ad.concat_cols([Tensor(z_n2), ad.softmax(logits_r)])
            )
            terms["cm"] = loss_cm(x_g, x_g2)

        if c.gan_kind == "wasserstein-gp":
            adv_g = ad.mean_all(self._critic_scores(x_g))
            if not c.strict_adversarial_sign:
                adv_g = ad.neg(adv_g)
        else:
            adv_g = ad.neg(
                ad.mean_all(ad.log(ad.add_const(self._critic_scores(x_g), _P_FLOOR)))
            )

        weighted = {
            "ce": c.alpha_cl,
            "mse": c.alpha_mse,
            "rec": c.alpha_re,
            "cm": c.alpha_cm,
        }
        g_total = adv_g
        for name, weight in weighted.items():
            if name in terms:
                g_total = ad.add(g_total, ad.mul(terms[name], weight))
        e_total = None
        for name, weight in {**weighted, "pce": c.alpha_pcl}.items():
            if name in terms:
                piece = ad.mul(terms[name], weight)
                e_total = piece if e_total is None else ad.add(e_total, piece)

        grads_g = ad.backward(g_total, nets.generator.param_list())
        grads_e = (
            ad.backward(e_total, nets.encoder.param_list()) if e_total is not None else None
        )
        self.adam_g.step(grads_g)
        if grads_e is not None:
            self.adam_e.step(grads_e)

        report = StepReport(
            d_loss=d_loss_val,
            g_loss=g_total.item(),
            e_loss=e_total.item() if e_total is not None else 0.0,
            j_ce=terms["ce"].item() if "ce" in terms else 0.0,
            j_mse=terms["mse"].item() if "mse" in terms else 0.0,
            j_rec=terms["rec"].item() if "rec" in terms else 0.0,
            j_pce=terms["pce"].item() if "pce" in terms else 0.0,
            j_cm=terms["cm"].item() if "cm" in terms else 0.0,
            gp=gp_val,
            adv_g=adv_g.item(),
        )
        if not all(np.isfinite(v) for v in report.values()):
            raise TrainingError("non-finite loss during training step", report)
        return report

    # -- full run --------------------------------------------------------------

    def train(self, train_data, test_data=None, eval_restarts=10, eval_seed=0, eval_hook=None):
        """Run all epochs; returns per-epoch metrics.

        Evaluation encodes the held-out split and clusters it every
        ``eval_every`` epochs; the prior network is never updated.
        """
        c = self.config
        history = []
        features = train_data.features
        batch = min(c.batch, train_data.n)
        steps = max(1, train_data.n // batch)
        fields = ["d_loss", "g_loss", "e_loss", "j_ce", "j_mse", "j_rec", "j_pce", "j_cm", "gp"]
        for epoch in range(c.epochs):
            order = self.rng.permutation(train_data.n)
            sums = dict.fromkeys(fields, 0.0)
            for s in range(steps):
                x = features[order[s * batch : (s + 1) * batch]]
                report = self.step(x)
                for name in fields:
                    sums[name] += getattr(report, name)
            acc = nmi = None
            if test_data is not None and epoch % c.eval_every == 0:
                cluster_report = evaluation.encode_and_score(
                    self.nets.encoder,
                    test_data.features,
                    test_data.labels,
                    self.num_classes,
                    restarts=eval_restarts,
                    seed=eval_seed,
                )
                acc, nmi = cluster_report.acc, cluster_report.nmi
                if eval_hook is not None:
                    eval_hook(epoch, cluster_report)
            history.append(
                EpochMetrics(
                    epoch=epoch,
                    **{name: sums[name] / steps for name in fields},
                    acc=acc,
                    nmi=nmi,
                )
            )
        return history


def write_metrics_csv(history, path):
    """Per-epoch CSV of losses, penalty, and clustering scores."""
    header = "epoch,d_loss,g_loss,e_loss,j_ce,j_mse,j_rec,j_pce,j_cm,gp,acc,nmi"
    lines = [header]
    for row in history:
        cells = [str(row.epoch)]
        cells += [
            repr(getattr(row, name))
            for name in ("d_loss", "g_loss", "e_loss", "j_ce", "j_mse", "j_rec", "j_pce", "j_cm", "gp")
        ]
        cells.append("" if row.acc is None else repr(row.acc))
        cells.append("" if row.nmi is None else repr(row.nmi))
        lines.append(",".join(cells))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
