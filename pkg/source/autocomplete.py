from __future__ import annotations

from prompt_toolkit.styles import Style


RUN_FLAGS = [
    "--b", "--dt", "--time", "--seed", "--out", "--n-qubits", "--integrator", "--stride", "--gamma", "--b0",
    "--b-max", "--ema-window", "--grid-start", "--grid-stop", "--grid-step", "--b-values", "--max-order",
    "--depth", "--bins", "--draws", "--ensemble", "--seeds", "--workers", "--record", "--db", "--config", "--check",
]


def get_autocomplete(experiments: list[str], supported_commands: list[str]) -> dict[str, dict | None]:
    """Nested completion table: ``run`` and ``show`` complete experiment names, ``help`` completes commands."""
    result = {}

    flags = {flag: None for flag in RUN_FLAGS}
    for command in supported_commands:
        if command == "run":
            result[command] = {name: flags for name in experiments}
        elif command == "show":
            result[command] = {name: None for name in experiments}
        elif command == "help":
            result[command] = {name: None for name in supported_commands}
        else:
            result[command] = None

    return result


style = Style.from_dict({
    'completion-menu.completion': 'bg:#1c3d5a #e6f0ff',
    'completion-menu.completion.current': 'bg:#3a7bd5 #ffffff',
    'completion-menu.meta.completion': 'bg:#1c3d5a #9fb8d0',
    'scrollbar.background': 'bg:#5a7a99',
    'scrollbar.button': 'bg:#0d1f2d',
    'prompt': '#3a7bd5 bold',
})
