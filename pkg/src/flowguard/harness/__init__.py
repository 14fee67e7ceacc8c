"""Deterministic simulator standing in for the instrumented serverless
runtime: scripted applications and services, event interception, clock
control, and attack injection."""

from .appspec import (
    AppSpec,
    FunctionSpec,
    InputSpec,
    ResponseRule,
    ScriptError,
    SendDirective,
    SendEachDirective,
    ServiceSpec,
    TriggerRule,
    sample_inputs,
)
from .fixtures import FIXTURES, load_app
from .simulator import (
    AttackKind,
    AttackScenario,
    RunMode,
    RunReport,
    Simulator,
    eval_rounds,
    inject,
    run,
)

__all__ = [
    "AppSpec",
    "AttackKind",
    "AttackScenario",
    "FIXTURES",
    "FunctionSpec",
    "InputSpec",
    "ResponseRule",
    "RunMode",
    "RunReport",
    "ScriptError",
    "SendDirective",
    "SendEachDirective",
    "ServiceSpec",
    "Simulator",
    "TriggerRule",
    "eval_rounds",
    "inject",
    "load_app",
    "run",
    "sample_inputs",
]
