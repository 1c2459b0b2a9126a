"""morseflow: gradient-flow dynamics, Morse cochain complexes, and the
integration identities tying instanton counts to cohomology."""

from .expressions import EvalError, Expression, ExpressionError, ParseError, parse_expression
from .forms import DifferentialForm, FormDegreeError, exterior_derivative, wedge
from .scenario import Chart, GroundTruth, Scenario, ScenarioError, check_lyapunov, consistency_report
from .scenarios import builtin_names, builtin_scenarios, export_scenarios, get_scenario, load_scenario

__version__ = "0.1.0"
