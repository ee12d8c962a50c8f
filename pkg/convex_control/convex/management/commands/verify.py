from dataclasses import asdict

from convex.artifacts import load_model_file, save_model, write_json
from convex.management.base import ToolkitCommand
from convex.serializers import VerificationReportSerializer
from convex.verification import DEFAULT_TARGETS, SUITES, random_target, run_suite


class Command(ToolkitCommand):
    help = 'Run a verification suite on a model file or a random instance; exits 1 when it fails.'

    def add_command_arguments(self, parser):
        parser.add_argument('--suite', required=True, choices=sorted(SUITES))
        parser.add_argument('--model', help='model JSON document; a random instance when omitted')
        parser.add_argument('--random', choices=['icnn', 'icrnn', 'maxaffine'],
                            help='kind of random instance (default depends on the suite)')
        parser.add_argument('--pieces', type=int, default=8, help='random instance: pieces or hidden units')
        parser.add_argument('--dim', type=int, default=3, help='random instance: input dimension')
        parser.add_argument('--samples', type=int)

    def run(self, options):
        suite = options['suite']
        if options['model']:
            target = load_model_file(self.input(options['model']))
        else:
            kind = options['random'] or DEFAULT_TARGETS[suite]
            target = random_target(kind, options['pieces'], options['dim'], self.seed)
            save_model(self.output('target.json'), target)
        report = run_suite(suite, target, options['samples'], self.seed)
        data = VerificationReportSerializer(asdict(report)).data
        write_json(self.output('report.json'), data)
        verdict = 'passed' if report.passed else 'FAILED'
        self.stdout.write(f'{suite}: {verdict}, max violation {report.max_violation:.3g} over {report.samples} samples')
        if not report.passed:
            return f'{suite} verification failed (max violation {report.max_violation:.3g}); see {self.out}'
        return None
