import pandas as pd

from convex.artifacts import write_csv
from convex.management.base import ToolkitCommand
from convex.plants import PLANTS, PriceSignal, circles_dataset, exogenous_frame, plant_from_settings
from convex.sysid import collect_random_rollouts, rollouts_to_frame

DEFAULT_ROLLOUTS = 10
DEFAULT_HORIZON = 200


class Command(ToolkitCommand):
    help = 'Generate a random-action rollout dataset, or the two-circles dataset, as CSV.'
    config_sections = ('circles',)

    def add_command_arguments(self, parser):
        parser.add_argument('--plant', required=True, choices=sorted(PLANTS) + ['circles'])
        parser.add_argument('--rollouts', type=int, help='number of rollouts (building: one per month)')
        parser.add_argument('--horizon', type=int, help='steps per rollout (building: one month)')
        parser.add_argument('--start', type=int, default=0, help='time index of the first step')
        parser.add_argument('--workers', type=int, default=1)
        parser.add_argument('--n', type=int, help='circles: number of points')
        parser.add_argument('--noise', type=float, help='circles: radial noise std')

    def command_flags(self, options):
        return {
            'plant': {},
            'circles': {'n': options.get('n'), 'noise': options.get('noise')},
        }

    def run(self, options):
        if options['plant'] == 'circles':
            section = self.config['circles']
            points, labels = circles_dataset(section['n'], tuple(section['radii']), section['noise'], self.seed)
            frame = pd.DataFrame({'x0': points[:, 0], 'x1': points[:, 1], 'label': labels})
            write_csv(self.output('circles.csv'), frame)
            self.stdout.write(f'wrote {len(frame)} labelled points to {self.out}')
            return None

        plant = plant_from_settings(options['plant'], self.config['plant'])
        self.config['plant'] = plant.config()
        months = getattr(plant.params, 'months', None)
        n = options['rollouts'] or months or DEFAULT_ROLLOUTS
        horizon = options['horizon']
        if horizon is None:
            horizon = plant.steps_per_month if months else DEFAULT_HORIZON
        rollouts = collect_random_rollouts(
            plant, n, horizon, self.seed, start=options['start'], workers=options['workers'],
        )
        write_csv(self.output('rollouts.csv'), rollouts_to_frame(rollouts))
        if plant.exo_dim:
            price = PriceSignal.from_settings(plant.params.steps_per_day)
            exo = exogenous_frame(plant, n * horizon, options['start'], price)
            write_csv(self.output('exogenous.csv'), exo)
        self.stdout.write(f'wrote {n} {plant.name} rollouts of {horizon} steps to {self.out}')
        return None
