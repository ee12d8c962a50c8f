import numpy as np

from convex.artifacts import load_model_file, read_csv, write_csv, write_json
from convex.control import (
    OBJECTIVES, MpcController, OracleAdapter, SetpointController, ShootingController, SolverConfig,
    ZeroController, adapter_for, cost_for_plant, fit_linear_models, receding_horizon_run, savings,
    trajectory_metrics,
)
from convex.exceptions import InvalidParameter
from convex.management.base import ToolkitCommand
from convex.numeric import seeded_stream
from convex.plants import PLANTS, PriceSignal, plant_from_settings
from convex.sysid import FrameLayout, rollouts_from_frame

PLANT_SECTIONS = {'rc_thermal': 'building', 'point_mass': 'point_mass', 'battery': 'battery'}
DEFAULT_OBJECTIVES = {'rc_thermal': 'energy', 'point_mass': 'reward', 'battery': 'energy'}


class Command(ToolkitCommand):
    help = 'Run a closed-loop episode on a plant and report metrics and savings against a baseline.'
    config_sections = ('mpc', 'building', 'point_mass', 'battery', 'tou')

    def add_command_arguments(self, parser):
        parser.add_argument('--plant', required=True, choices=sorted(PLANTS))
        parser.add_argument('--controller', default='mpc', choices=['mpc', 'shooting', 'setpoint', 'zero'])
        models = parser.add_mutually_exclusive_group()
        models.add_argument('--oracle', action='store_true', help="use the plant's own equations as models")
        models.add_argument('--linear', help='rollout CSV to fit the linear RC baseline models on')
        models.add_argument('--model', help='output model f (icnn or icrnn JSON with normalization)')
        parser.add_argument('--state-model', help='state model g (icnn or icrnn JSON with normalization)')
        parser.add_argument('--delta', action='store_true', help='the state model predicts s_t+1 - s_t')
        parser.add_argument('--objective', choices=OBJECTIVES)
        parser.add_argument('--horizon', type=int)
        parser.add_argument('--episode', type=int, help='closed-loop steps')
        parser.add_argument('--start', type=int, default=0, help='time index of the first step')
        parser.add_argument('--k', type=int, help='random-shooting sequences')
        parser.add_argument('--tol', type=float)
        parser.add_argument('--max-iters', type=int)
        parser.add_argument('--restarts', type=int)
        parser.add_argument('--band', type=float, nargs=2, metavar=('LOW', 'HIGH'),
                            help='building comfort band (defaults to the configured band)')
        parser.add_argument('--no-band', action='store_true', help='drop the building comfort band')
        parser.add_argument('--baseline', choices=['setpoint', 'zero', 'none'],
                            help='controller the savings are measured against')

    def command_flags(self, options):
        return {
            'plant': {},
            'mpc': {
                'horizon': options.get('horizon'), 'tol': options.get('tol'),
                'max_iters': options.get('max_iters'), 'restarts': options.get('restarts'),
                'shooting_k': options.get('k'),
            },
            'building': {'comfort_band': options.get('band')},
        }

    def run(self, options):
        plant = plant_from_settings(options['plant'], self.config['plant'])
        self.config['plant'] = plant.config()
        objective = options['objective'] or DEFAULT_OBJECTIVES[plant.name]
        price = None
        if plant.name == 'rc_thermal' or objective == 'tou':
            price = PriceSignal.from_settings(getattr(plant.params, 'steps_per_day', 144), **self.config['tou'])
        cost = cost_for_plant(plant, objective, price)
        horizon = self._horizon(plant, options)
        episode = options['episode']
        if episode is None:
            episode = self.config[PLANT_SECTIONS[plant.name]]['episode']
        band = self._band(plant, options)
        solver = SolverConfig.from_settings(**self.config['mpc'], seed=self.seed)
        s0 = self._initial_state(plant)

        controller, affine = self._controller(plant, options, cost, horizon, solver, band)
        trajectory = receding_horizon_run(plant, controller, episode, s0, options['start'])
        metrics = {
            'plant': plant.name, 'controller': options['controller'], 'objective': objective,
            'horizon': horizon, 'episode': episode,
            **trajectory_metrics(trajectory, cost, price, band),
            'cost_structure': cost.structural_check(state_model_affine=affine),
        }

        baseline_name = options['baseline'] or ('setpoint' if plant.name == 'rc_thermal' else 'zero')
        if baseline_name != 'none' and baseline_name != options['controller']:
            baseline_controller = SetpointController(plant) if baseline_name == 'setpoint' else ZeroController(plant)
            baseline = receding_horizon_run(plant, baseline_controller, episode, s0, options['start'])
            base_metrics = trajectory_metrics(baseline, cost, price, band)
            metrics['baseline'] = {'controller': baseline_name, **base_metrics}
            metrics['savings'] = {
                'total_cost_pct': savings(base_metrics['total_cost'], metrics['total_cost']),
                'energy_pct': savings(base_metrics['energy'], metrics['energy']),
            }

        write_csv(self.output('trajectory.csv'), trajectory.to_frame(cost))
        write_json(self.output('metrics.json'), metrics)
        self.stdout.write(
            f"{plant.name} {options['controller']}: {episode} steps, total cost {metrics['total_cost']:.6g}"
        )
        return None

    def _horizon(self, plant, options):
        if options['horizon'] is not None:
            return options['horizon']
        # the building plans over the shared mpc horizon; the other plants carry their own
        section = self.config[PLANT_SECTIONS[plant.name]]
        return section.get('horizon', self.config['mpc']['horizon'])

    def _band(self, plant, options):
        if plant.name != 'rc_thermal' or options['no_band']:
            return None
        low, high = self.config['building']['comfort_band']
        return float(low), float(high)

    def _initial_state(self, plant):
        if plant.name == 'rc_thermal':
            return np.full(plant.state_dim, float(self.config['building']['fixed_setpoint']))
        return plant.initial_state(seeded_stream(self.seed, 0))

    def _models(self, plant, options):
        """``(f, g, affine)`` adapters for the MPC problem."""
        layout = FrameLayout.for_plant(plant)
        if options['oracle']:
            return OracleAdapter(plant, 'output'), OracleAdapter(plant, 'state'), False
        if options['linear']:
            rollouts = rollouts_from_frame(read_csv(self.input(options['linear'])), plant=plant.name)
            fit = fit_linear_models(rollouts, layout)
            return fit.output_model, fit.state_model, True
        if not options['model'] or not options['state_model']:
            raise InvalidParameter('learned control needs --model and --state-model (or --oracle / --linear)')
        f = load_model_file(self.input(options['model']))
        g = load_model_file(self.input(options['state_model']))
        for path, model in ((options['model'], f), (options['state_model'], g)):
            if getattr(model, 'normalization', None) is None:
                raise InvalidParameter(f'{path} carries no normalization spec')
        return adapter_for(f, layout), adapter_for(g, layout, options['delta']), False

    def _controller(self, plant, options, cost, horizon, solver, band):
        kind = options['controller']
        if kind == 'setpoint':
            return SetpointController(plant), False
        if kind == 'zero':
            return ZeroController(plant), False
        f, g, affine = self._models(plant, options)
        low, high = (band if band else (None, None))
        controller_cls = MpcController if kind == 'mpc' else ShootingController
        controller = controller_cls(plant, f, g, cost, horizon, solver, low, high, solver.shooting_k)
        return controller, affine
