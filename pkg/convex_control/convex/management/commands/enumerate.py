from convex.artifacts import load_model_file, save_model, write_json
from convex.exceptions import UnsupportedArchitecture
from convex.icnn import IcnnModel
from convex.management.base import ToolkitCommand
from convex.maxaffine import deduplicate, enumerate_pieces


class Command(ToolkitCommand):
    help = 'List the affine pieces of a one-hidden-layer ICNN as a max-affine document.'

    def add_command_arguments(self, parser):
        parser.add_argument('--model', required=True, help='icnn JSON document')
        parser.add_argument('--dedupe', action='store_true', help='drop exactly repeated pieces')

    def run(self, options):
        model = load_model_file(self.input(options['model']))
        if not isinstance(model, IcnnModel):
            raise UnsupportedArchitecture(
                f'enumeration reads a one-hidden-layer icnn with zero passthrough, got {model.kind}'
            )
        pieces = enumerate_pieces(model)
        emitted = pieces.n_pieces
        if options['dedupe']:
            pieces = deduplicate(pieces)
        save_model(self.output('maxaffine.json'), pieces)
        write_json(self.output('summary.json'), {
            'hidden_units': model.widths[0], 'pieces': emitted, 'distinct_pieces': pieces.n_pieces,
        })
        self.stdout.write(f'enumerated {emitted} pieces ({pieces.n_pieces} kept)')
        return None
