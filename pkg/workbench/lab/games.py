"""
The robustness and detectability games, and the sweeps built on them.

A game owns one ``Distribution``: every draw (training data, attacker
samples, trusted data, evaluation split, test set) comes from it without
replacement, so the sets are disjoint within the game.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import (
    CLEAN_LABEL,
    CODE_POISONING,
    build_triggers,
    pcb_train,
    poison,
    segment_test_sets,
    triggered_test_set,
)
from .data import Distribution, LabeledSet, derive_seeds, resolve_count
from .defenses import run_defense
from .metrics import mean_std, roc_auc
from .network import accuracy, build_model
from .repair import RepairConfig, RepairEvaluation
from .training import TrainConfig, train

logger = logging.getLogger(__name__)


def identity_stage(value):
    return value


@dataclass
class DefenseChain:
    """
    Sanitize and deploy stages are identities; ``defense`` names the
    post-training step. ``tune(suspect, trust, cfg) -> cfg`` may pick the
    repair hyper-parameters per game.
    """

    defense: str = "none"
    repair: RepairConfig = field(default_factory=RepairConfig)
    sanitize: object = identity_stage
    deploy: object = identity_stage
    tune: object = None


@dataclass
class GameOutcome:
    cda: float
    asr: float
    model_asr: float
    oracle_asr: float
    pre_cda: float
    pre_asr: float
    attack: dict
    defense: str
    n: int
    m: int
    r: int
    seeds: dict
    trace: object = None
    segment_asr: list = None
    checkpoints: dict = field(default_factory=dict, repr=False)

    def as_dict(self):
        return {
            "cda": self.cda,
            "asr": self.asr,
            "model_asr": self.model_asr,
            "oracle_asr": self.oracle_asr,
            "pre_cda": self.pre_cda,
            "pre_asr": self.pre_asr,
            "attack": self.attack,
            "defense": self.defense,
            "n": self.n,
            "m": self.m,
            "r": self.r,
            "seeds": self.seeds,
            "segment_asr": self.segment_asr,
            "trace": None if self.trace is None else self.trace.as_dict(),
        }


def attack_asr(model, triggered, oracle):
    """Acc(triggered, target; model) - Acc(triggered, target; oracle) and its two parts."""
    model_part = accuracy(triggered, triggered.labels, model)
    oracle_part = accuracy(triggered, triggered.labels, oracle)
    return model_part - oracle_part, model_part, oracle_part


def collect(distribution, attack, n, m, seed=None, surrogate=None):
    """
    Draw ``n`` clean samples and ``m`` attacker samples, and return the clean
    samples joined with the injected ones as ``(data, labels, triggers)``.

    Poison-label attacks draw their ``m`` samples outside the target class,
    clean-label attacks inside it.
    """
    spec = replace(attack, poison_count=m, seed=attack.seed if seed is None else seed)
    clean = distribution.draw(n)
    if m == 0 or spec.label_rule == CODE_POISONING:
        triggers = build_triggers(
            spec, clean.image_size, clean.images.shape[-1], clean, distribution.oracle, surrogate
        )
        return clean, clean.labels, triggers
    all_classes = range(distribution.class_count)
    if spec.label_rule == CLEAN_LABEL:
        eligible = [spec.target_class]
    else:
        eligible = [c for c in all_classes if c != spec.target_class]
    attacker = distribution.draw(m, classes=eligible)
    result = poison(attacker, distribution.oracle, spec, surrogate=surrogate)
    data = LabeledSet.concatenate(clean, result.injected)
    return data, data.labels, result.triggers


def train_suspect(spec, data, train_cfg, init, train_fn, triggers):
    if spec.label_rule == CODE_POISONING:
        steps = spec.pcb_steps if spec.pcb_steps is not None else 2 * train_cfg.steps
        return pcb_train(
            init, data, spec.target_class, spec.pcb_fraction, steps, triggers[0],
            cfg=train_cfg, seed=train_cfg.seed,
        )
    return train_fn(data, train_cfg, init=init)


def train_surrogate(distribution, spec, n, train_cfg, seed, train_fn):
    if spec.attack != "advclean":
        return None
    data = distribution.draw(max(n // 2, distribution.class_count))
    logger.info("Training AdvClean surrogate on %d disjoint samples", len(data))
    init = build_model(data.class_count, data.image_size, seed, data.images.shape[-1])
    return train_fn(data, train_cfg.with_seed(seed), init=init)


def robustness_game(distribution, attack, n, m, r, defense_chain=None, seed=0,
                    train_cfg=None, test_size=500, eval_size=200, train_fn=train,
                    surrogate=None):
    """
    Poison, train, defend and measure.

    Returns a GameOutcome whose ``asr`` is the model's accuracy on triggered
    test images against the target label minus the oracle's accuracy on the
    same images and labels.
    """
    chain = defense_chain or DefenseChain()
    train_cfg = train_cfg or TrainConfig()
    seeds = derive_seeds(seed)
    spec = replace(attack, poison_count=m, seed=seeds.attack)
    r_count = resolve_count(r, n)
    surrogate = surrogate or train_surrogate(distribution, spec, n, train_cfg, seeds.attack, train_fn)

    data, _, triggers = collect(distribution, spec, n, m, seeds.attack, surrogate)
    data = chain.sanitize(data)
    init = build_model(data.class_count, data.image_size, seeds.init, data.images.shape[-1])
    suspect = train_suspect(spec, data, train_cfg.with_seed(seeds.training), init, train_fn, triggers)
    suspect.attack = spec.as_dict()

    trust = distribution.draw_stratified(r_count)
    evaluation_split = distribution.draw(eval_size)
    test = distribution.draw(test_size)
    triggered = triggered_test_set(test, spec, triggers)
    oracle = distribution.oracle

    pre_cda = accuracy(evaluation_split, evaluation_split.labels, suspect)
    pre_asr, _, _ = attack_asr(suspect, triggered, oracle)
    evaluation = RepairEvaluation(
        clean=evaluation_split,
        report=triggered_test_set(evaluation_split, spec, triggers),
    )
    defense = chain.defense
    repair_cfg = replace(chain.repair, seed=seeds.defense)
    if chain.tune is not None and defense != "none":
        repair_cfg = chain.tune(suspect, trust, repair_cfg)
        defense = repair_cfg.method
    repaired, trace = run_defense(defense, suspect, trust, repair_cfg, evaluation, pre_cda)
    deployed = chain.deploy(repaired)

    cda = accuracy(test, test.labels, deployed)
    asr, model_asr, oracle_asr = attack_asr(deployed, triggered, oracle)
    segment_asr = None
    if spec.attack == "tsb":
        segment_asr = [attack_asr(deployed, s, oracle)[0] for s in segment_test_sets(test, spec, triggers)]
    logger.info(
        "Robustness game %s m=%d r=%d defense=%s: CDA %.3f ASR %.3f",
        spec.attack, m, r_count, defense, cda, asr,
    )
    return GameOutcome(
        cda=cda,
        asr=asr,
        model_asr=model_asr,
        oracle_asr=oracle_asr,
        pre_cda=accuracy(test, test.labels, suspect),
        pre_asr=pre_asr,
        attack=spec.as_dict(),
        defense=defense,
        n=n,
        m=m,
        r=r_count,
        seeds=seeds.as_dict(),
        trace=trace,
        segment_asr=segment_asr,
        checkpoints={"train": suspect, "repair": repaired, "deploy": deployed},
    )


@dataclass
class DetectabilityRound:
    correct: int
    coin: int
    prediction: int
    seeds: dict


def detectability_round(distribution, attack, n, m, r, detector, seed=0, init=None,
                        train_cfg=None, train_fn=train, surrogate=None):
    """
    Train one poisoned and one clean model from the same init, flip a coin,
    and ask the detector about the chosen one. Coin 0 selects the backdoored
    model, matching the detector's convention (0 = backdoored, 1 = clean).
    """
    train_cfg = train_cfg or TrainConfig()
    seeds = derive_seeds(seed)
    spec = replace(attack, poison_count=m, seed=seeds.attack)
    surrogate = surrogate or train_surrogate(distribution, spec, n, train_cfg, seeds.attack, train_fn)
    poisoned_data, _, triggers = collect(distribution, spec, n, m, seeds.attack, surrogate)
    clean_data = poisoned_data.subset(np.flatnonzero(~poisoned_data.poisoned))
    if init is None:
        init = build_model(
            poisoned_data.class_count, poisoned_data.image_size, seeds.init,
            poisoned_data.images.shape[-1],
        )
    cfg = train_cfg.with_seed(seeds.training)
    backdoored = train_suspect(spec, poisoned_data, cfg, init, train_fn, triggers)
    clean = train_fn(clean_data, cfg, init=init)
    trust = distribution.draw_stratified(resolve_count(r, n))
    coin = int(np.random.default_rng(seeds.defense).integers(2))
    prediction = int(detector(backdoored if coin == 0 else clean, trust))
    return DetectabilityRound(int(prediction == coin), coin, prediction, seeds.as_dict())


def detectability_game(distribution, attack, init, n, m, r, detector, seed=0,
                       train_cfg=None, train_fn=train, surrogate=None):
    """1 if the detector identifies the coin-selected model correctly, else 0."""
    return detectability_round(
        distribution, attack, n, m, r, detector, seed, init, train_cfg, train_fn, surrogate
    ).correct


@dataclass
class CurvePoint:
    m: int
    effectiveness: float
    effectiveness_std: float
    detectability: dict
    detectability_std: dict
    asr_values: list
    poisoned_scores: dict
    clean_scores: dict

    def as_dict(self):
        return {
            "m": self.m,
            "effectiveness": self.effectiveness,
            "effectiveness_std": self.effectiveness_std,
            "detectability": self.detectability,
            "detectability_std": self.detectability_std,
            "asr_values": self.asr_values,
            "poisoned_scores": self.poisoned_scores,
            "clean_scores": self.clean_scores,
        }


def population_member(pool, oracle, attack, n, m, r, scorers, seed, train_cfg=None,
                      test_size=500, train_fn=train):
    """
    One poisoned and one clean model on the same clean draw, their test ASR
    and their detector scores.
    """
    train_cfg = train_cfg or TrainConfig()
    seeds = derive_seeds(seed)
    distribution = Distribution(pool, oracle, seeds.data)
    spec = replace(attack, poison_count=m, seed=seeds.attack)
    surrogate = train_surrogate(distribution, spec, n, train_cfg, seeds.attack, train_fn)
    data, _, triggers = collect(distribution, spec, n, m, seeds.attack, surrogate)
    clean_data = data.subset(np.flatnonzero(~data.poisoned))
    init = build_model(data.class_count, data.image_size, seeds.init, data.images.shape[-1])
    poisoned = train_suspect(
        spec, data, train_cfg.with_seed(seeds.training), init, train_fn, triggers
    )
    clean = train_fn(clean_data, train_cfg.with_seed(seeds.training + 1), init=init)
    trust = distribution.draw_stratified(resolve_count(r, n))
    test = distribution.draw(test_size)
    triggered = triggered_test_set(test, spec, triggers)
    asr, _, _ = attack_asr(poisoned, triggered, oracle)
    return {
        "asr": asr,
        "cda": accuracy(test, test.labels, poisoned),
        "clean_cda": accuracy(test, test.labels, clean),
        "poisoned": {name: float(scorer(poisoned, trust)) for name, scorer in scorers.items()},
        "clean": {name: float(scorer(clean, trust)) for name, scorer in scorers.items()},
        "seeds": seeds.as_dict(),
    }


def member_seed_for(seed, *path):
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1)[0])


def effectiveness_curve(pool, oracle, attack, m_values, repeats, n, r, scorers,
                        seed=0, train_cfg=None, test_size=500, populations=1,
                        train_fn=train, member_fn=None):
    """
    For every m: mean/std ASR over ``repeats`` poisoned models, and per scorer
    the ROC AUC separating them from ``repeats`` clean models. With several
    ``populations`` the AUC std is taken across populations.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    member_fn = member_fn or population_member
    points = []
    for m_index, m in enumerate(m_values):
        populations_members = [
            [
                member_fn(
                    pool, oracle, attack, n, m, r, scorers,
                    member_seed_for(seed, m_index, population, repeat),
                    train_cfg, test_size, train_fn,
                )
                for repeat in range(repeats)
            ]
            for population in range(populations)
        ]
        points.append(curve_point(m, populations_members, list(scorers)))
    return points


def curve_point(m, populations_members, scorer_names):
    """Aggregate population members (grouped by population) into one CurvePoint."""
    asr_values = []
    poisoned_scores = {name: [] for name in scorer_names}
    clean_scores = {name: [] for name in scorer_names}
    aucs = {name: [] for name in scorer_names}
    for members in populations_members:
        for member in members:
            asr_values.append(member["asr"])
        for name in scorer_names:
            poisoned = [member["poisoned"][name] for member in members]
            clean = [member["clean"][name] for member in members]
            poisoned_scores[name].extend(poisoned)
            clean_scores[name].extend(clean)
            aucs[name].append(roc_auc(poisoned, clean))
    eta, eta_std = mean_std(asr_values)
    rho = {name: mean_std(values) for name, values in aucs.items()}
    point = CurvePoint(
        m=int(m),
        effectiveness=eta,
        effectiveness_std=eta_std,
        detectability={name: value[0] for name, value in rho.items()},
        detectability_std={name: value[1] for name, value in rho.items()},
        asr_values=asr_values,
        poisoned_scores=poisoned_scores,
        clean_scores=clean_scores,
    )
    logger.info("m=%d: eta=%.3f rho=%s", m, eta, point.detectability)
    return point


@dataclass
class EfficiencyPoint:
    r: int
    data_efficiency: float
    cda: float
    pre_cda: float
    pre_asr: float
    trace: object = None

    def as_dict(self):
        return {
            "r": self.r,
            "data_efficiency": self.data_efficiency,
            "cda": self.cda,
            "pre_cda": self.pre_cda,
            "pre_asr": self.pre_asr,
            "trace": None if self.trace is None else self.trace.as_dict(),
        }


def data_efficiency(pool, oracle, attack, defense, r_values, delta, n, m, seed=0,
                    train_cfg=None, repair_cfg=None, test_size=500, eval_size=200,
                    train_fn=train, suspect=None):
    """
    Remaining ASR after ``defense`` for each trusted-data size in ``r_values``.

    One suspect model is trained and every r gets its own disjoint trusted
    draw. The remaining ASR is clipped to [0, 1].
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    train_cfg = train_cfg or TrainConfig()
    repair_cfg = replace(repair_cfg or RepairConfig(), delta=delta)
    seeds = derive_seeds(seed)
    distribution = Distribution(pool, oracle, seeds.data)
    spec = replace(attack, poison_count=m, seed=seeds.attack)
    surrogate = train_surrogate(distribution, spec, n, train_cfg, seeds.attack, train_fn)
    data, _, triggers = collect(distribution, spec, n, m, seeds.attack, surrogate)
    if suspect is None:
        init = build_model(data.class_count, data.image_size, seeds.init, data.images.shape[-1])
        suspect = train_suspect(
            spec, data, train_cfg.with_seed(seeds.training), init, train_fn, triggers
        )
    evaluation_split = distribution.draw(eval_size)
    test = distribution.draw(test_size)
    triggered = triggered_test_set(test, spec, triggers)
    evaluation = RepairEvaluation(
        clean=evaluation_split,
        report=triggered_test_set(evaluation_split, spec, triggers),
    )
    pre_cda = evaluation.cda(suspect)
    pre_asr = float(np.clip(attack_asr(suspect, triggered, oracle)[0], 0.0, 1.0))
    points = []
    for r in r_values:
        trust = distribution.draw_stratified(resolve_count(r, n))
        repaired, trace = run_defense(
            defense, suspect, trust, replace(repair_cfg, seed=seeds.defense), evaluation, pre_cda
        )
        remaining = float(np.clip(attack_asr(repaired, triggered, oracle)[0], 0.0, 1.0))
        points.append(
            EfficiencyPoint(
                r=len(trust),
                data_efficiency=remaining,
                cda=accuracy(test, test.labels, repaired),
                pre_cda=accuracy(test, test.labels, suspect),
                pre_asr=pre_asr,
                trace=trace,
            )
        )
        logger.info("%s r=%d: remaining ASR %.3f", defense, len(trust), remaining)
    return points
