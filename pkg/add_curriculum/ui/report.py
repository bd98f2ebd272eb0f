from __future__ import annotations

from typing import Any, Dict, Iterable, List, Optional, Sequence

from add_curriculum.services.mazes import HEADING_NAMES, MazeEnv
from add_curriculum.services.ppo_agent import EvalResult


def render_maze(env: MazeEnv) -> str:
    """Plain-text maze: ``#`` wall, ``A`` agent, ``G`` goal, ``.`` empty, outer ring drawn as wall."""
    size = env.size
    border = "#" * (size + 2)
    lines = [border]
    for row in range(size):
        cells = []
        for col in range(size):
            if (row, col) == tuple(env.start):
                cells.append("A")
            elif (row, col) == tuple(env.goal):
                cells.append("G")
            else:
                cells.append("#" if env.walls[row, col] else ".")
        lines.append("#" + "".join(cells) + "#")
    lines.append(border)
    return "\n".join(lines)


def _format_rate(value: Any) -> str:
    try:
        numeric = float(value)
    except (TypeError, ValueError):
        return "--"
    if numeric != numeric:
        return "--"
    return f"{numeric:.3f}"


def _table(headers: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    body = [list(headers)] + [list(row) for row in rows]
    widths = [max(len(str(row[i])) for row in body) for i in range(len(headers))]
    lines = ["  ".join(str(cell).ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def format_eval(results: Sequence[EvalResult]) -> str:
    rows = [(r.name, _format_rate(r.solved_rate), _format_rate(r.mean_return)) for r in results]
    text = _table(("env", "solved", "return"), rows)
    if results:
        mean = sum(r.solved_rate for r in results) / len(results)
        text += f"\nmean solved rate: {_format_rate(mean)}"
    return text


def format_generate(report: Any, show: int = 3) -> str:
    """Summary of a controllable-generation batch plus the first ``show`` mazes."""
    lines = [
        f"difficulty k={report.k}, {len(report.envs)} environments",
        f"mean blocks: {_format_rate(report.mean_blocks)}",
        f"mean shortest path: {_format_rate(report.mean_shortest_path)}",
        f"solvable fraction: {_format_rate(report.solvable_frac)}",
    ]
    if not report.critic_trained:
        lines.append("warning: critic untrained, difficulty guidance is uninformative")
    for env in report.envs[:show]:
        lines.append("")
        lines.append(f"heading {HEADING_NAMES[env.start_heading]}")
        lines.append(render_maze(env))
    return "\n".join(lines)


def format_verify(checks: Sequence[Any]) -> str:
    rows = [
        (c.name, "ok" if c.passed else "FAILED", f"{c.value:.3g}", f"{c.limit:.3g}")
        for c in checks
    ]
    failed = sum(1 for c in checks if not c.passed)
    return _table(("check", "status", "value", "limit"), rows) + f"\n{len(checks) - failed}/{len(checks)} passed"


def format_sweep(results: Dict[float, float]) -> str:
    return _table(("omega", "mean solved"), [(f"{omega:g}", _format_rate(rate)) for omega, rate in results.items()])


def format_train(rows: List[Dict[str, str]], trend: Optional[Sequence[float]] = None) -> str:
    training = [row for row in rows if not row.get("eval_env")]
    if not training:
        return "no epochs run"
    last = training[-1]
    lines = [
        f"epochs: {last['epoch']} ({last['method']}, seed {last['seed']})",
        f"last mean regret: {_format_rate(last['mean_regret'])}",
        f"last mean shortest path: {_format_rate(last['mean_shortest_path'])}",
    ]
    if trend is not None:
        lines.append(f"curriculum trend: rho {trend[0]:.3f} (p={trend[1]:.3g})")
    return "\n".join(lines)
