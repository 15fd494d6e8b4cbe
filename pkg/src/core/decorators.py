"""
Command boundary helpers - 统一错误处理

Commands return plain dicts; the decorator turns any exception into the
same failure shape so the CLI and the tool server report errors alike.
"""

import logging
from contextlib import contextmanager
from functools import wraps
from typing import Any, Callable, Dict, Iterator, cast

from .errors import QmtError, StageError

logger = logging.getLogger(__name__)


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Run a pipeline stage; any error inside is re-raised as StageError(name)."""
    logger.info(f"stage {name}")
    try:
        yield
    except StageError:
        raise
    except (QmtError, ValueError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


def handle_command_errors(func: Callable) -> Callable:
    """
    命令统一错误处理 - 标准化返回格式

    Success results get success=True; failures become
    {"success": False, "error", "type", "stage", "command"} plus the
    error's context.
    """

    @wraps(func)
    def wrapper(*args, **kwargs) -> Dict[str, Any]:
        command = func.__name__.removeprefix("cmd_")
        try:
            result = func(*args, **kwargs)
            if isinstance(result, dict) and "success" not in result:
                result["success"] = True
            return cast(Dict[str, Any], result)
        except StageError as exc:
            cause = exc.cause
            failure = cause.to_dict() if isinstance(cause, QmtError) else {"type": type(cause).__name__}
            failure.update({"success": False, "error": str(exc), "stage": exc.stage, "command": command})
            logger.error(f"{command}: {exc}")
            return failure
        except QmtError as exc:
            failure = exc.to_dict()
            failure.update({"success": False, "stage": None, "command": command})
            logger.error(f"{command}: {exc}")
            return failure
        except Exception as exc:
            logger.exception(f"{command} failed")
            return {
                "success": False,
                "error": str(exc),
                "type": type(exc).__name__,
                "stage": None,
                "command": command,
            }

    return wrapper
