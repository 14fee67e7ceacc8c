"""Command-line interface for the whole toolkit.

Exit codes: 0 success, 1 usage or data error, 2 an attack scenario went
undetected (so CI fails when a detection regresses).
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import harness
from .controller import Controller, ControllerServer, TenantConfig
from .enforce import Mode, bench_check
from .graphbuild import DEFAULT_T_LCP
from .harness.simulator import (
    AttackKind,
    AttackScenario,
    RunMode,
    curve_to_csv,
    eval_rounds,
    inject,
    policies_from_recording,
    record_rounds,
    sample_rounds,
)
from .model import LocalFlowGraph, read_trace_log, write_trace_log
from .policy import PolicyBundle, build_policies
from .protocol import CONTROLLER_ENV_VAR


@click.group()
def main() -> None:
    """Flow-graph learning and enforcement for serverless applications."""


@main.group()
def graph() -> None:
    """Build and inspect flow graphs."""


@graph.command("build")
@click.option(
    "--traces",
    "traces_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False),
    help="Directory of JSONL trace logs, one application execution per file.",
)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--t-lcp", default=DEFAULT_T_LCP, show_default=True, type=int)
@click.option(
    "--app",
    "app_ref",
    default=None,
    help="Fixture name or AppSpec file supplying the service topology.",
)
def graph_build(traces_dir: str, out_path: str, t_lcp: int, app_ref: str | None) -> None:
    """Build local graphs per function plus the global graph from traces."""
    files = sorted(Path(traces_dir).glob("*.jsonl"))
    if not files:
        raise click.ClickException(f"no .jsonl trace files in {traces_dir}")
    logs = []
    try:
        for path in files:
            logs.append((path.stem, read_trace_log(path)))
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    topology = harness.load_app(app_ref).topology() if app_ref else None
    try:
        bundle = build_policies(logs, topology, t_lcp=t_lcp)
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    bundle.save(out_path)
    click.echo(
        f"built {len(bundle.functions)} local graphs from {len(files)} executions -> {out_path}"
    )


@graph.command("inspect")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--dot", "dot_path", default=None, type=click.Path())
def graph_inspect(path: str, dot_path: str | None) -> None:
    """Dump a graph (or policy bundle) and optionally export DOT."""
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    graphs: dict[str, LocalFlowGraph] = {}
    if "functions" in data:
        bundle = PolicyBundle.from_dict(data)
        graphs = bundle.functions
    else:
        parsed = LocalFlowGraph.from_dict(data)
        graphs = {parsed.function: parsed}
    dot_lines = ["digraph flows {"]
    for name, g in sorted(graphs.items()):
        click.echo(f"function {name}: {len(g.nodes)} nodes, {len(g.edges)} edges")
        for node_id in sorted(g.nodes):
            node = g.nodes[node_id]
            label = node.kind.value
            if node.pattern:
                label += f" {node.op.value} {node.pattern}"
            if node.counter > 1:
                label += f" x{node.counter}"
            if node.group_body:
                label += " [" + " ".join(f.url for f in node.group_body) + "]"
            click.echo(f"  {node_id}: {label}")
            dot_lines.append(f'  "{name}/{node_id}" [label="{label}"];')
        for src, dst in sorted(g.edges):
            click.echo(f"  {src} -> {dst}")
            dot_lines.append(f'  "{name}/{src}" -> "{name}/{dst}";')
    dot_lines.append("}")
    if dot_path:
        Path(dot_path).write_text("\n".join(dot_lines) + "\n", encoding="utf-8")
        click.echo(f"wrote DOT to {dot_path}")


@main.group()
def controller() -> None:
    """Run and talk to the central controller."""


@controller.command("run")
@click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option("--listen", default="127.0.0.1:7788", show_default=True)
def controller_run(config_path: str, listen: str) -> None:
    """Serve the controller over TCP (envelope framing)."""
    host, _, port = listen.partition(":")
    config = TenantConfig.from_json_file(config_path)
    server = ControllerServer(Controller(config), host, int(port or 0))
    actual_host, actual_port = server.address
    click.echo(f"controller listening on {actual_host}:{actual_port}")
    click.echo(f"set {CONTROLLER_ENV_VAR}={actual_host}:{actual_port} for guards")
    try:
        server._server.serve_forever()  # noqa: SLF001 - foreground serve
    except KeyboardInterrupt:
        server.stop()


@main.command("simulate")
@click.option("--app", "app_ref", required=True)
@click.option(
    "--mode",
    type=click.Choice([m.value for m in RunMode]),
    default=RunMode.RECORD.value,
    show_default=True,
)
@click.option("--rounds", default=3, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option(
    "--policies", "policies_path", default=None, type=click.Path(dir_okay=False)
)
def simulate(
    app_ref: str,
    mode: str,
    rounds: int,
    seed: int,
    out_dir: str | None,
    policies_path: str | None,
) -> None:
    """Run an application; record trace logs or enforce policies."""
    app = harness.load_app(app_ref)
    run_mode = RunMode(mode)
    bundle = None
    if run_mode is RunMode.ENFORCE:
        if policies_path:
            bundle = PolicyBundle.load(policies_path)
        else:
            bundle = policies_from_recording(app, rounds, seed)
    sim = harness.Simulator(app, mode=run_mode, policies=bundle, seed=seed)
    report = sim.run_rounds(sample_rounds(app, rounds, seed))
    if out_dir:
        directory = Path(out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        for log in report.request_logs:
            name = f"round{log.round_index:04d}-{log.request_index}.jsonl"
            write_trace_log(directory / name, log.events)
        (directory / "summary.json").write_text(report.to_json(), encoding="utf-8")
        click.echo(f"wrote {len(report.request_logs)} trace logs to {out_dir}")
    click.echo(report.to_json(), nl=False)
    if run_mode is RunMode.ENFORCE and report.denials:
        click.echo(f"{len(report.denials)} flows denied", err=True)


@main.command("attack")
@click.option(
    "--scenario",
    type=click.Choice([k.value for k in AttackKind]),
    required=True,
)
@click.option("--app", "app_ref", default="photo", show_default=True)
@click.option("--function", "function_name", default=None)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--train-rounds", default=10, show_default=True, type=int)
def attack(
    scenario: str,
    app_ref: str,
    function_name: str | None,
    seed: int,
    train_rounds: int,
) -> None:
    """Inject an attack scenario; exits nonzero iff it was NOT detected."""
    app = harness.load_app(app_ref)
    kind = AttackKind(scenario)
    default_targets = {
        AttackKind.EXFILTRATE_FLOW: app.entry_functions[0],
        AttackKind.REPEAT_FLOW: app.entry_functions[0],
        AttackKind.BYPASS_INVOKE: next(
            (f.name for f in app.functions if f.name not in app.entry_functions),
            app.entry_functions[0],
        ),
        AttackKind.OUT_OF_ORDER: app.entry_functions[0],
    }
    target = function_name or default_targets[kind]
    bundle = policies_from_recording(app, train_rounds, seed)
    report = inject(app, AttackScenario(kind=kind, function=target), bundle, seed)
    click.echo(json.dumps(report.detection, indent=2, sort_keys=True))
    if not report.detection or not report.detection["detected"]:
        click.echo("attack NOT detected", err=True)
        sys.exit(2)


@main.command("eval")
@click.option("--app", "app_ref", default="mapreduce", show_default=True)
@click.option("--rounds", default=30, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--t-lcp", default=DEFAULT_T_LCP, show_default=True, type=int)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
def eval_command(
    app_ref: str, rounds: int, seed: int, t_lcp: int, out_path: str | None
) -> None:
    """Coverage-error curve: errors on held-out rounds vs training prefix."""
    app = harness.load_app(app_ref)
    curve = eval_rounds(app, rounds, seed, t_lcp)
    csv_text = curve_to_csv(curve)
    if out_path:
        Path(out_path).write_text(csv_text, encoding="utf-8")
        click.echo(f"wrote {out_path}")
    else:
        click.echo(csv_text, nl=False)


@main.command("bench")
@click.option("--nodes", default=1000, show_default=True, type=int)
@click.option("--iters", default=1000, show_default=True, type=int)
def bench(nodes: int, iters: int) -> None:
    """Policy-checking micro-benchmark on a linear chain graph."""
    elapsed = bench_check(nodes, iters)
    per_check_us = (elapsed / iters) * 1e6 if iters else 0.0
    click.echo(
        f"{iters} checks on a {nodes}-node chain: "
        f"{elapsed * 1e3:.3f} ms total, {per_check_us:.3f} us/check"
    )


if __name__ == "__main__":
    main()
