"""Ablation protocol: one training per seed, mode sweep at prediction time.

For each seed the synthetic corpus, schedule, split, and trainer all key
off that seed.  The trained checkpoint is evaluated under every requested
mode (prediction-time ablations share one set of weights).  A second
training with replay disabled and the local head off gives the
no-replay forgetting baseline.
"""

from dataclasses import dataclass, field, replace

from .config import TrainerConfig
from .corpus import SyntheticSpec, generate_synthetic, split_tasks
from .evaluator import run_full_evaluation, train_test_split
from .projectors import BRANCHES, projector_payload
from .state import init_state
from .trainer import train_task

DEFAULT_MODES = ("full", "naive_match", "global_only", "zero_shot")


@dataclass
class SeedResult:
    seed: int
    reports: dict                       # mode -> SessionReport
    no_replay_global: object | None     # SessionReport or None
    first_task_payloads: dict           # branch -> bytes, right after session 1
    final_task_payloads: dict           # branch -> bytes, from the finished state
    state: object
    bundle: object
    test_samples: list


@dataclass
class AblationResult:
    spec: SyntheticSpec
    increment: int
    per_seed: dict = field(default_factory=dict)   # seed -> SeedResult

    def mean_last_accuracy(self, mode: str) -> float:
        vals = [r.reports[mode].last_accuracy for r in self.per_seed.values()]
        return sum(vals) / len(vals)

    def mean_forgetting(self, mode: str) -> float:
        vals = [r.reports[mode].forgetting for r in self.per_seed.values()]
        return sum(vals) / len(vals)

    def mean_no_replay_forgetting(self) -> float:
        vals = [r.no_replay_global.forgetting for r in self.per_seed.values()]
        return sum(vals) / len(vals)


def _train_full_run(bundle, schedule, train_samples, trainer_cfg):
    state = init_state(bundle.dimension, trainer_cfg)
    first_payloads = None
    for session_classes in schedule.sessions:
        train_task(state, bundle, session_classes, train_samples)
        if first_payloads is None:
            first_payloads = {b: projector_payload(state.stacks[b], 1)
                              for b in BRANCHES}
    return state, first_payloads


def run_seed(seed: int, spec: SyntheticSpec, increment: int,
             trainer_cfg: TrainerConfig, modes=DEFAULT_MODES,
             with_no_replay: bool = True) -> SeedResult:
    trainer_cfg = replace(trainer_cfg, seed=seed)
    bundle = generate_synthetic(spec, seed)
    schedule = split_tasks(bundle.class_ids(), 0, increment, seed)
    train_rows, test_rows = train_test_split(bundle, seed)
    train_samples = [bundle.samples[i] for i in train_rows]
    test_samples = [bundle.samples[i] for i in test_rows]

    state, first_payloads = _train_full_run(bundle, schedule, train_samples,
                                            trainer_cfg)
    reports = {mode: run_full_evaluation(state, bundle, test_samples, mode)
               for mode in modes}
    final_payloads = {b: projector_payload(state.stacks[b], 1) for b in BRANCHES}

    no_replay = None
    if with_no_replay:
        bare_cfg = replace(trainer_cfg, replay_enabled=False)
        bare_state, _ = _train_full_run(bundle, schedule, train_samples, bare_cfg)
        no_replay = run_full_evaluation(bare_state, bundle, test_samples,
                                        "global_only")
    return SeedResult(seed=seed, reports=reports, no_replay_global=no_replay,
                      first_task_payloads=first_payloads,
                      final_task_payloads=final_payloads,
                      state=state, bundle=bundle, test_samples=test_samples)


def run_ablation(seeds=(1993, 1994, 1995), spec: SyntheticSpec | None = None,
                 increment: int = 4, trainer_cfg: TrainerConfig | None = None,
                 modes=DEFAULT_MODES, with_no_replay: bool = True) -> AblationResult:
    spec = spec or SyntheticSpec()
    trainer_cfg = trainer_cfg or TrainerConfig()
    result = AblationResult(spec=spec, increment=increment)
    for seed in seeds:
        result.per_seed[seed] = run_seed(seed, spec, increment, trainer_cfg,
                                         modes=modes, with_no_replay=with_no_replay)
    return result
