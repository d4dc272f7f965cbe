"""Command-line front end.

Subcommands:

* ``account``  privacy curves for given (q, sigma, T) and adjacencies,
* ``audit``    a full auditing campaign from a preset or JSON config,
* ``sweep``    an audit repeated over one hyperparameter grid,
* ``craft``    canary construction only, written as JSON,
* ``simulate`` the worst-case game over a range of noise levels.

Exit status is 0 on success, 2 for usage or configuration errors and 3 for
failures while running.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import pathlib
import sys

import numpy as np

from subaudit import accounting, audit, canaries, data, models, numerics, worstcase
from subaudit.mechanism import DpParams, TrainConfig

OUTPUT_ENV = 'SUBAUDIT_OUTPUT_DIR'
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SCENARIO_TAGS = ('S1',) + canaries.SCENARIOS

CSV_COLUMNS = ('step', 'scenario', 'q', 'sigma', 'C', 'T', 'lr', 'R',
               'eps_lower', 'eps_ar_acct', 'eps_s_acct', 'eps_s_group',
               'fpr_upper', 'fnr_upper', 'mu_lower', 'campaign', 'seed',
               'fingerprint')


class ConfigError(ValueError):
    """Invalid campaign configuration; the message lists every problem."""


@dataclasses.dataclass
class CampaignConfig:
    name: str = 'campaign'
    scenario: str = 'S2'
    q: float = 1.0
    sigma: float | None = None
    target_eps_s: float | None = None
    clip: float = 2.0
    steps: int = 500
    delta: float = 1e-5
    lr: float = 1e-3
    optimizer: str = 'sgd'
    stride: int = 25
    model: str = 'linear'
    hidden: tuple[int, int] = (128, 128)
    init: str = 'fixed'
    dataset: dict = dataclasses.field(default_factory=lambda: {
        'kind': 'synthetic', 'n': 500, 'dim': 32, 'classes': 10,
        'separation': 4.0})
    aux_fraction: float = 0.2
    repeats: int = 500
    campaigns: int = 3
    seed: int = 0
    craft_steps: int = 1000
    craft_lr: float = 0.1
    norm_mse: bool = False
    fixed_class: bool = False
    lanes: int = 250

    def validate(self) -> 'CampaignConfig':
        errors = []

        def need(cond, msg):
            if not cond:
                errors.append(msg)

        need(self.scenario in SCENARIO_TAGS,
             f'scenario must be one of {", ".join(SCENARIO_TAGS)}, '
             f'got {self.scenario!r}')
        need(isinstance(self.q, (int, float)) and 0 < self.q <= 1,
             f'q must be in (0, 1], got {self.q}')
        need((self.sigma is None) != (self.target_eps_s is None),
             'set exactly one of sigma and target_eps_s')
        need(self.sigma is None or self.sigma > 0,
             f'sigma must be positive, got {self.sigma}')
        need(self.target_eps_s is None or self.target_eps_s > 0,
             f'target_eps_s must be positive, got {self.target_eps_s}')
        need(self.clip > 0, f'clip must be positive, got {self.clip}')
        need(isinstance(self.steps, int) and self.steps >= 1,
             f'steps must be a positive integer, got {self.steps}')
        need(0 < self.delta < 1, f'delta must be in (0, 1), got {self.delta}')
        need(self.lr > 0, f'lr must be positive, got {self.lr}')
        need(self.optimizer in ('sgd', 'adam'),
             f'optimizer must be sgd or adam, got {self.optimizer!r}')
        need(isinstance(self.stride, int) and self.stride >= 1,
             f'stride must be a positive integer, got {self.stride}')
        need(self.model in models.ARCHITECTURES,
             f'model must be one of {sorted(models.ARCHITECTURES)}, '
             f'got {self.model!r}')
        need(self.init in ('fixed', 'random'),
             f'init must be fixed or random, got {self.init!r}')
        need(isinstance(self.repeats, int) and self.repeats >= 10,
             f'repeats must be an integer >= 10, got {self.repeats}')
        need(isinstance(self.campaigns, int) and self.campaigns >= 1,
             f'campaigns must be a positive integer, got {self.campaigns}')
        need(isinstance(self.seed, int) and self.seed >= 0,
             f'seed must be a non-negative integer, got {self.seed}')
        need(isinstance(self.craft_steps, int) and self.craft_steps >= 0,
             f'craft_steps must be a non-negative integer, got {self.craft_steps}')
        need(self.craft_lr > 0, f'craft_lr must be positive, got {self.craft_lr}')
        need(0 < self.aux_fraction < 1,
             f'aux_fraction must be in (0, 1), got {self.aux_fraction}')
        need(isinstance(self.lanes, int) and self.lanes >= 1,
             f'lanes must be a positive integer, got {self.lanes}')
        ds = self.dataset if isinstance(self.dataset, dict) else {}
        need(isinstance(self.dataset, dict), 'dataset must be an object')
        kind = ds.get('kind')
        if kind == 'synthetic':
            for key in ('n', 'dim', 'classes'):
                need(isinstance(ds.get(key), int) and ds.get(key) >= 1,
                     f'dataset.{key} must be a positive integer')
            need(isinstance(ds.get('separation'), (int, float))
                 and ds.get('separation') >= 0,
                 'dataset.separation must be non-negative')
        elif kind == 'csv':
            need(isinstance(ds.get('path'), str), 'dataset.path must be a string')
        else:
            errors.append(f'dataset.kind must be synthetic or csv, got {kind!r}')
        if errors:
            raise ConfigError('invalid configuration:\n  ' + '\n  '.join(errors))
        return self

    def canonical(self) -> dict:
        d = dataclasses.asdict(self)
        d['hidden'] = list(self.hidden)
        return d

    def fingerprint(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, obj: dict) -> 'CampaignConfig':
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f'unknown configuration keys: {", ".join(unknown)}')
        obj = dict(obj)
        if 'hidden' in obj:
            obj['hidden'] = tuple(obj['hidden'])
        return cls(**obj)


_FINETUNE = dict(q=1.0, target_eps_s=8.0, clip=2.0, steps=500, lr=1e-3,
                 stride=25, model='linear', init='fixed', repeats=500)

PRESETS = {
    'worstcase-fig1': dict(name='worstcase-fig1', scenario='S1', q=1.0,
                           target_eps_s=4.0, clip=1.0, steps=100,
                           repeats=25000, stride=100),
    **{f'finetune-{s.lower()}': dict(_FINETUNE, name=f'finetune-{s.lower()}',
                                     scenario=s)
       for s in canaries.SCENARIOS},
    'scratch': dict(name='scratch', scenario='S2', q=0.25, target_eps_s=8.0,
                    clip=5.0, steps=500, lr=0.0018, optimizer='adam',
                    stride=125, model='mlp3', init='random', repeats=500,
                    dataset={'kind': 'synthetic', 'n': 2000, 'dim': 64,
                             'classes': 20, 'separation': 4.0}),
}

SWEEPS = {
    'clipping': ('clip', (1.0, 2.0, 4.0)),
    'steps': ('steps', (100, 500)),
    'lr': ('lr', (1e-3, 1e-2)),
    'R': ('repeats', (250, 500, 1000, 2500)),
}


def resolve_sigma(cfg: CampaignConfig) -> float:
    if cfg.sigma is not None:
        return float(cfg.sigma)
    return accounting.calibrate_sigma(cfg.target_eps_s, cfg.q, cfg.steps,
                                      cfg.delta, accounting.SUBSTITUTE)


def load_dataset(cfg: CampaignConfig) -> data.Dataset:
    spec = cfg.dataset
    if spec['kind'] == 'csv':
        return data.load_csv(spec['path'], spec.get('n_classes'))
    gen = numerics.RngStream(cfg.seed, stream=0).generator()
    return data.gen_synthetic(spec['n'], spec['dim'], spec['classes'],
                              spec['separation'], gen)


def _arch(cfg: CampaignConfig, dataset: data.Dataset):
    if cfg.model == 'linear':
        return models.LinearSoftmax(dataset.dim, dataset.n_classes)
    return models.MLP3(dataset.dim, dataset.n_classes, tuple(cfg.hidden))


def _theta0(cfg, arch):
    # The linear head starts at zero; MLP weights come from a seeded draw.
    if cfg.model == 'mlp3':
        return arch.init_params(numerics.RngStream(cfg.seed, stream=1).generator())
    return arch.init_params()


@dataclasses.dataclass
class Prepared:
    """Everything a campaign needs once the canary has been crafted."""

    arch: object
    theta0: np.ndarray
    base: data.Dataset
    spec: canaries.CanarySpec
    dp: DpParams
    train_cfg: TrainConfig


def prepare(cfg: CampaignConfig) -> Prepared:
    """Loads data, calibrates noise and crafts the canary for `cfg`."""
    sigma = resolve_sigma(cfg)
    dp = DpParams(cfg.q, sigma, cfg.clip, cfg.steps, cfg.delta)
    tcfg = TrainConfig(lr=cfg.lr, optimizer=cfg.optimizer, stride=cfg.stride)
    dataset = load_dataset(cfg)
    arch = _arch(cfg, dataset)
    theta0 = _theta0(cfg, arch)
    craft_rng = numerics.RngStream(cfg.seed, stream=2)
    if cfg.scenario == 'S2':
        spec = canaries.craft_gradient_pair(arch, theta0, dataset, tcfg, dp,
                                            craft_rng.child(0).generator())
        return Prepared(arch, theta0, dataset, spec, dp, tcfg)
    pool, aux = dataset, None
    if cfg.scenario == 'S5':
        pool, aux = data.split_aux(dataset, cfg.aux_fraction,
                                   craft_rng.child(1).generator())
    ref = canaries.reference_train(arch, theta0, pool, cfg.steps, tcfg,
                                   craft_rng.child(0).generator(), q=cfg.q)
    target = canaries.select_target(pool, ref)
    z = pool[target]
    if cfg.scenario == 'S3':
        spec = canaries.craft_input_canary(z, arch, ref.theta, cfg.craft_steps,
                                           cfg.craft_lr, cfg.norm_mse)
    elif cfg.scenario == 'S4':
        spec = canaries.craft_mislabel_canary(z, arch, ref.theta)
    else:
        spec = canaries.select_natural_canary(z, arch, ref.theta, aux)
    spec.metadata['target_index'] = target
    spec.metadata['target_id'] = int(pool.ids[target])
    return Prepared(arch, theta0, pool.without(target), spec, dp, tcfg)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _row(cfg, dp, est: audit.EpsEstimate, campaign, overlay, scenario):
    return dict(step=est.step, scenario=scenario, q=dp.q, sigma=dp.sigma,
                C=dp.clip, T=dp.steps, lr=cfg.lr, R=cfg.repeats,
                eps_lower=est.eps_lower, fpr_upper=est.fpr_upper,
                fnr_upper=est.fnr_upper, mu_lower=est.mu_lower,
                campaign=campaign, seed=cfg.seed,
                fingerprint=cfg.fingerprint(), **overlay)


def run_s1(cfg: CampaignConfig, sigma: float | None = None):
    """Worst-case game campaigns; returns CSV rows."""
    sigma = resolve_sigma(cfg) if sigma is None else sigma
    dp = DpParams(cfg.q, sigma, cfg.clip, cfg.steps, cfg.delta)
    game = worstcase.WorstCaseGame(dp)
    overlay = audit.accounting_overlay(dp, dp.steps)
    rows = []
    for c in range(cfg.campaigns):
        out = worstcase.run_worstcase_audit(
            game, cfg.repeats, numerics.RngStream(cfg.seed, stream=3 + c))
        est = audit.estimate_eps(out, cfg.delta)
        rows.append(_row(cfg, dp, est, c, overlay, 'S1'))
    return rows


def run_campaigns(cfg: CampaignConfig, workers: int = 1):
    """Runs all campaign repeats; returns (rows, canary spec or None)."""
    if cfg.scenario == 'S1':
        return run_s1(cfg), None
    prep = prepare(cfg)
    overlays = {t: audit.accounting_overlay(prep.dp, t)
                for t in audit.logged_steps(cfg.steps, cfg.stride)}
    rows = []
    for c in range(cfg.campaigns):
        theta0 = None if cfg.init == 'random' else prep.theta0
        outcomes = audit.run_audit_campaign(
            prep.spec, prep.arch, prep.base, prep.dp, prep.train_cfg,
            cfg.repeats, numerics.RngStream(cfg.seed, stream=3 + c),
            theta0=theta0, fixed_class=cfg.fixed_class, lanes=cfg.lanes,
            workers=workers)
        for out in outcomes:
            est = audit.estimate_eps(out, cfg.delta)
            rows.append(_row(cfg, prep.dp, est, c, overlays[out.step],
                             cfg.scenario))
    return rows, prep.spec


def summary(cfg: CampaignConfig, rows, spec) -> dict:
    steps = sorted({r['step'] for r in rows})
    per_step = []
    for t in steps:
        vals = [r['eps_lower'] for r in rows if r['step'] == t]
        mean, lo, hi = audit.summarize(vals)
        first = next(r for r in rows if r['step'] == t)
        per_step.append({'step': t, 'eps_lower_mean': mean,
                         'eps_lower_band': [lo, hi],
                         'eps_ar_acct': first['eps_ar_acct'],
                         'eps_s_acct': first['eps_s_acct'],
                         'eps_s_group': first['eps_s_group']})
    out = {'config': cfg.canonical(), 'fingerprint': cfg.fingerprint(),
           'seed': cfg.seed, 'sigma': rows[0]['sigma'], 'per_step': per_step}
    if spec is not None:
        out['canary'] = {'scenario': spec.scenario, 'metadata': spec.metadata}
    return out


def _output_dir(args) -> pathlib.Path:
    path = pathlib.Path(args.out or os.environ.get(OUTPUT_ENV) or 'results')
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: pathlib.Path, text: str):
    with open(path, 'w', newline='') as f:
        f.write(text)


def _load_config(args) -> CampaignConfig:
    base: dict = {}
    if getattr(args, 'preset', None):
        if args.preset not in PRESETS:
            raise ConfigError(f'unknown preset {args.preset!r}; expected one of '
                              f'{", ".join(sorted(PRESETS))}')
        base.update(PRESETS[args.preset])
    if getattr(args, 'config', None):
        try:
            with open(args.config) as f:
                base.update(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f'cannot read config {args.config}: {e}') from None
    cfg = CampaignConfig.from_dict(base)
    overrides = {k: getattr(args, k) for k in
                 ('scenario', 'q', 'clip', 'steps', 'lr', 'stride', 'repeats',
                  'campaigns', 'seed', 'name')
                 if getattr(args, k, None) is not None}
    if getattr(args, 'sigma', None) is not None:
        overrides.update(sigma=args.sigma, target_eps_s=None)
    if getattr(args, 'target_eps', None) is not None:
        overrides.update(target_eps_s=args.target_eps, sigma=None)
    return dataclasses.replace(cfg, **overrides).validate()


def cmd_account(args) -> int:
    adjacencies = [a for a in (args.adjacency or '').split(',') if a]
    if not adjacencies:
        raise ConfigError('at least one adjacency is required '
                          f'({", ".join(accounting.ADJACENCIES)})')
    bad = [a for a in adjacencies if a not in accounting.ADJACENCIES]
    if bad:
        raise ConfigError(f'unknown adjacency {bad[0]!r}; expected one of '
                          f'{", ".join(accounting.ADJACENCIES)}')
    DpParams(args.q, args.sigma, 1.0, args.steps, args.delta)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['q', 'sigma', 'T', 'adjacency', 'method', 'delta', 'epsilon'])
    for adj in adjacencies:
        eps = accounting.epsilon_for(args.q, args.sigma, args.steps, args.delta, adj)
        writer.writerow([_fmt(args.q), _fmt(args.sigma), args.steps, adj, 'pld',
                         _fmt(args.delta), _fmt(eps)])
        if adj == accounting.ADD_REMOVE:
            group = accounting.group_privacy_convert(eps, args.delta)
            writer.writerow([_fmt(args.q), _fmt(args.sigma), args.steps,
                             accounting.SUBSTITUTE, 'group_privacy',
                             _fmt(group.delta), _fmt(group.epsilon)])
    text = buf.getvalue()
    if args.out:
        _write(pathlib.Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _load_config(args)
    rows, spec = run_campaigns(cfg, args.workers)
    out = _output_dir(args)
    _write(out / f'{cfg.name}.csv', _rows_to_csv(rows))
    _write(out / f'{cfg.name}.json',
           json.dumps(summary(cfg, rows, spec), indent=2, sort_keys=True) + '\n')
    print(out / f'{cfg.name}.csv')
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.sweep not in SWEEPS:
        raise ConfigError(f'unknown sweep {args.sweep!r}; expected one of '
                          f'{", ".join(SWEEPS)}')
    base = _load_config(args)
    key, values = SWEEPS[args.sweep]
    rows = []
    for v in values:
        cfg = dataclasses.replace(base, **{key: v}).validate()
        rows.extend(run_campaigns(cfg, args.workers)[0])
    out = _output_dir(args)
    path = out / f'sweep-{args.sweep}-{base.name}.csv'
    _write(path, _rows_to_csv(rows))
    print(path)
    return EXIT_OK


def cmd_craft(args) -> int:
    cfg = _load_config(args)
    if cfg.scenario == 'S1':
        raise ConfigError('S1 has no crafted canary; use simulate')
    spec = prepare(cfg).spec
    spec.metadata['fingerprint'] = cfg.fingerprint()
    spec.metadata['seed'] = cfg.seed
    out = _output_dir(args)
    _write(out / f'{cfg.name}-canary.json', spec.to_json() + '\n')
    print(out / f'{cfg.name}-canary.json')
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if cfg.scenario != 'S1':
        raise ConfigError('simulate runs the S1 worst-case game only')
    if args.sigmas:
        sigmas = [float(s) for s in args.sigmas.split(',')]
    else:
        targets = [float(s) for s in args.targets.split(',')]
        sigmas = [accounting.calibrate_sigma(e, cfg.q, cfg.steps, cfg.delta)
                  for e in targets]
    rows = []
    for s in sigmas:
        rows.extend(run_s1(cfg, s))
    out = _output_dir(args)
    _write(out / f'{cfg.name}-simulate.csv', _rows_to_csv(rows))
    print(out / f'{cfg.name}-simulate.csv')
    return EXIT_OK


def _campaign_flags(p: argparse.ArgumentParser):
    p.add_argument('--preset', help=f'one of {", ".join(sorted(PRESETS))}')
    p.add_argument('--config', help='JSON campaign config; flags override it')
    p.add_argument('--scenario')
    p.add_argument('--q', type=float)
    p.add_argument('--sigma', type=float)
    p.add_argument('--target-eps', type=float,
                   help='calibrate sigma to this substitute epsilon')
    p.add_argument('--clip', type=float)
    p.add_argument('--steps', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--stride', type=int)
    p.add_argument('--repeats', type=int, help='training runs R per campaign')
    p.add_argument('--campaigns', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--name')
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--out', help=f'output directory (default ${OUTPUT_ENV} '
                   'or ./results)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='subaudit',
        description='Audit DP-SGD under substitute adjacency.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('account', help='privacy accounting curves')
    p.add_argument('--q', type=float, required=True)
    p.add_argument('--sigma', type=float, required=True)
    p.add_argument('--steps', type=int, required=True)
    p.add_argument('--delta', type=float, default=1e-5)
    p.add_argument('--adjacency', default='add_remove,substitute',
                   help='comma-separated adjacency relations')
    p.add_argument('--out', help='CSV file (default stdout)')
    p.set_defaults(func=cmd_account)

    p = sub.add_parser('audit', help='run an auditing campaign')
    _campaign_flags(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser('sweep', help='audit over a hyperparameter grid')
    p.add_argument('sweep', help=f'one of {", ".join(SWEEPS)}')
    _campaign_flags(p)
    p.set_defaults(func=cmd_sweep, preset='finetune-s2')

    p = sub.add_parser('craft', help='craft a canary and write it as JSON')
    _campaign_flags(p)
    p.set_defaults(func=cmd_craft)

    p = sub.add_parser('simulate', help='worst-case game over noise levels')
    _campaign_flags(p)
    p.add_argument('--sigmas', help='comma-separated noise multipliers')
    p.add_argument('--targets', default='1,2,4,8',
                   help='comma-separated substitute epsilons to calibrate to')
    p.set_defaults(func=cmd_simulate, preset='worstcase-fig1')
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if args.command != 'account' and not (args.preset or args.config):
        print('error: give --preset or --config', file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, data.DataFormatError) as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as e:
        print(f'error: invalid configuration: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except (audit.CampaignError, numerics.NumericalError,
            canaries.CraftingError, ValueError) as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
