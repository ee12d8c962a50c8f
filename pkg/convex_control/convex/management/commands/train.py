import numpy as np
import pandas as pd

from convex.artifacts import read_csv, save_model, write_csv, write_json
from convex.control import adapter_for, adapter_rmse, fit_window_model
from convex.exceptions import DimensionMismatch, InvalidParameter
from convex.icnn import TrainingConfig, classification_accuracy, classify_circles, rmse, train_icnn
from convex.icrnn import RecurrentTrainingConfig
from convex.management.base import ToolkitCommand
from convex.sysid import make_windows, rollouts_from_frame, split, split_rollout


def _columns(frame, prefix):
    cols = [c for c in frame.columns if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(prefix):]))


class Command(ToolkitCommand):
    help = 'Train an ICNN or ICRNN on a CSV dataset; writes the model JSON and its loss history.'
    config_sections = ('icnn', 'icrnn', 'circles', 'sysid')

    def add_command_arguments(self, parser):
        parser.add_argument('--kind', required=True, choices=['icnn', 'icrnn'])
        parser.add_argument('--data', required=True, help='rollout, circles or x*/y* regression CSV')
        parser.add_argument('--target', default='output', choices=['output', 'state'],
                            help='rollouts: learn y_t (f) or s_t+1 (g)')
        parser.add_argument('--delta', action='store_true', default=None,
                            help='state target as the change s_t+1 - s_t')
        parser.add_argument('--window', type=int, help='icrnn memory window n_w')
        parser.add_argument('--widths', type=int, nargs='+', help='icnn hidden layer widths')
        parser.add_argument('--hidden', type=int, help='icrnn hidden units')
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--lr', type=float)
        parser.add_argument('--batch-size', type=int)
        parser.add_argument('--train-ratio', type=float, help='chronological train share of the rollouts')

    def command_flags(self, options):
        shared = {'epochs': options.get('epochs'), 'lr': options.get('lr'), 'batch_size': options.get('batch_size')}
        return {
            'icnn': {**shared, 'widths': options.get('widths')},
            'icrnn': {**shared, 'hidden': options.get('hidden'), 'window': options.get('window'),
                      'delta': options.get('delta')},
            'circles': {**shared, 'widths': options.get('widths')},
            'sysid': {'train_ratio': options.get('train_ratio')},
        }

    def run(self, options):
        frame = read_csv(self.input(options['data']))
        if 'rollout' in frame.columns:
            model, history, metrics = self.train_dynamics(frame, options)
        elif 'label' in frame.columns:
            model, history, metrics = self.train_classifier(frame, options)
        else:
            model, history, metrics = self.train_regression(frame, options)
        save_model(self.output('model.json'), model)
        write_csv(self.output('loss.csv'), pd.DataFrame({'epoch': np.arange(1, len(history) + 1), 'loss': history}))
        write_json(self.output('metrics.json'), metrics)
        self.stdout.write(f"trained {options['kind']}: " + ', '.join(f'{k} {v:.6g}' for k, v in metrics.items()
                                                                    if isinstance(v, float)))
        return None

    def _icnn_config(self, section='icnn'):
        return TrainingConfig.from_settings(section, **self.config[section], seed=self.seed)

    def train_dynamics(self, frame, options):
        kind, target = options['kind'], options['target']
        section = self.config['icrnn']
        delta = bool(section['delta']) and target == 'state'
        rollouts = rollouts_from_frame(frame, seed=self.seed)
        ratio = self.config['sysid']['train_ratio']
        if len(rollouts) > 1:
            train, test = split(rollouts, ratio)
        else:
            head, tail = split_rollout(rollouts[0], ratio)
            train, test = [head], [tail]
        n_w = section['window'] if kind == 'icrnn' else 0
        train_windows = make_windows(train, n_w)
        test_windows = make_windows(test, n_w, train_windows.layout)
        if kind == 'icrnn':
            config = RecurrentTrainingConfig.from_settings(**section, seed=self.seed)
        else:
            config = self._icnn_config()
        model, history = fit_window_model(train_windows, kind, target, delta, config)
        adapter = adapter_for(model, train_windows.layout, delta)
        metrics = {
            'target': target,
            'delta': delta,
            'window': n_w,
            'train_rmse': adapter_rmse(adapter, train_windows, target, model.normalization),
            'test_rmse': adapter_rmse(adapter, test_windows, target, model.normalization),
            'train_windows': len(train_windows),
            'test_windows': len(test_windows),
        }
        return model, history, metrics

    def train_classifier(self, frame, options):
        if options['kind'] != 'icnn':
            raise InvalidParameter('labelled point data trains an icnn classifier')
        points = frame[_columns(frame, 'x')].to_numpy()
        labels = frame['label'].to_numpy()
        model, history = classify_circles(points, labels, self._icnn_config('circles'))
        return model, history, {'accuracy': classification_accuracy(model, points, labels)}

    def train_regression(self, frame, options):
        if options['kind'] != 'icnn':
            raise InvalidParameter('regression data without rollouts trains an icnn')
        x_cols, y_cols = _columns(frame, 'x'), _columns(frame, 'y')
        if not x_cols or not y_cols:
            raise DimensionMismatch('regression data needs x0.. input and y0.. target columns')
        inputs, targets = frame[x_cols].to_numpy(), frame[y_cols].to_numpy()
        model, history = train_icnn(inputs, targets, self._icnn_config())
        return model, history, {'train_rmse': rmse(model, inputs, targets)}
