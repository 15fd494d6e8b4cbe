"""
Command registry - 命令注册表

One entry point for the CLI and the tool server: execute_command(name,
**kwargs) looks the command up and runs it. Commands register themselves
with @register_command; the command module is imported lazily on first use
so the engine never imports the application at import time.
"""

import importlib
import logging
from typing import Any, Callable, Dict, List, cast

logger = logging.getLogger(__name__)

COMMAND_MODULE = "qmt_hybrid.commands"

_COMMANDS: Dict[str, Callable[..., Dict[str, Any]]] = {}


def register_command(name: str) -> Callable[[Callable], Callable]:
    def decorator(func: Callable) -> Callable:
        _COMMANDS[name] = func
        return func

    return decorator


def _load_commands() -> None:
    """延迟导入避免循环依赖"""
    if not _COMMANDS:
        importlib.import_module(COMMAND_MODULE)


def get_command_registry() -> Dict[str, Callable[..., Dict[str, Any]]]:
    _load_commands()
    return dict(_COMMANDS)


def command_names() -> List[str]:
    return sorted(get_command_registry())


def execute_command(command_name: str, **kwargs: Any) -> Dict[str, Any]:
    """
    统一命令执行器

    Unknown names and unexpected keyword arguments come back as failure
    dicts; command errors are already shaped by handle_command_errors.
    """
    command = get_command_registry().get(command_name)
    if command is None:
        return {"success": False, "error": f"Unknown command: {command_name}", "command": command_name}
    try:
        return cast(Dict[str, Any], command(**kwargs))
    except TypeError as exc:
        logger.error(f"{command_name}: bad arguments: {exc}")
        return {"success": False, "error": f"Command execution failed: {exc}", "command": command_name}
