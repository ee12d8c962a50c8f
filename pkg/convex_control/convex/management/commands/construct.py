from convex.artifacts import load_model_file, read_csv, save_model, write_json
from convex.exceptions import InvalidParameter
from convex.icnn import relu_count
from convex.management.base import ToolkitCommand
from convex.maxaffine import MaxAffine, compile_to_icnn, fit_cpl


class Command(ToolkitCommand):
    help = 'Compile a max-affine function into an exact ICNN; optionally fit the max-affine function first.'

    def add_command_arguments(self, parser):
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument('--model', help='maxaffine JSON document')
        source.add_argument('--data', help='x*/y0 regression CSV to fit a max-affine function to')
        parser.add_argument('--pieces', type=int, help='number of affine pieces when fitting')
        parser.add_argument('--iterations', type=int, default=50)
        parser.add_argument('--restarts', type=int, default=5)

    def run(self, options):
        if options['model']:
            target = load_model_file(self.input(options['model']))
            if not isinstance(target, MaxAffine):
                raise InvalidParameter(f'construct needs a maxaffine document, got {target.kind}')
        else:
            if not options['pieces']:
                raise InvalidParameter('fitting needs --pieces')
            frame = read_csv(self.input(options['data']))
            x_cols = [c for c in frame.columns if c[:1] == 'x' and c[1:].isdigit()]
            x_cols.sort(key=lambda c: int(c[1:]))
            if not x_cols or 'y0' not in frame.columns:
                raise InvalidParameter('regression data needs x0.. input columns and a y0 target column')
            target = fit_cpl(frame[x_cols].to_numpy(), frame['y0'].to_numpy(), options['pieces'],
                             options['iterations'], self.seed, options['restarts'])
            save_model(self.output('maxaffine.json'), target)
        model = compile_to_icnn(target)
        save_model(self.output('icnn.json'), model)
        summary = {'pieces': target.n_pieces, 'relu_count': relu_count(model), 'depth': model.depth}
        write_json(self.output('summary.json'), summary)
        self.stdout.write(f"compiled {summary['pieces']} pieces into {summary['relu_count']} ReLUs")
        return None
