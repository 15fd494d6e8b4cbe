"""
qmt-hybrid tool server - 极简实现

The five commands as MCP tools plus one unified entry point; without
the mcp package every tool is a stub reporting that.
"""

import logging
import sys
from typing import Any, Dict, List, Optional

try:
    from mcp.server.fastmcp import FastMCP
except ImportError:
    FastMCP = None

from core.command_registry import execute_command

if FastMCP is not None:
    mcp = FastMCP("QmtHybrid", dependencies=["numpy", "scipy"])
    logging.basicConfig(level=logging.ERROR, stream=sys.stderr)

    @mcp.tool()
    def run_command(operation: str, **params) -> Dict[str, Any]:
        """统一命令入口"""
        return execute_command(operation, **params)

    @mcp.tool()
    def synth(config: Optional[str] = None, out: Optional[str] = None, seed: int = 0,
              mode: str = "corrected") -> Dict[str, Any]:
        """Build field, patches, shells and feedback"""
        return execute_command("synth", config=config, out=out, seed=seed, mode=mode)

    @mcp.tool()
    def simulate(x0: List[float], s0: str = "omega", config: Optional[str] = None,
                 out: Optional[str] = None, seed: int = 0, run: int = 0) -> Dict[str, Any]:
        """One certified hybrid run"""
        return execute_command("simulate", config=config, x0=x0, s0=s0, out=out, seed=seed, run=run)

    @mcp.tool()
    def sweep(config: Optional[str] = None, out: Optional[str] = None, seed: int = 0) -> Dict[str, Any]:
        """Quasi-optimality sweep"""
        return execute_command("sweep", config=config, out=out, seed=seed)

    @mcp.tool()
    def cutlocus(config: Optional[str] = None, out: Optional[str] = None) -> Dict[str, Any]:
        """Flagged cells of the stored field"""
        return execute_command("cutlocus", config=config, out=out)

    @mcp.tool()
    def certify(config: Optional[str] = None, out: Optional[str] = None) -> Dict[str, Any]:
        """Re-certify stored arcs"""
        return execute_command("certify", config=config, out=out)

    def main():
        """启动MCP服务器"""
        mcp.run()

else:
    # 降级模式
    def run_command(operation: str, **params) -> Dict[str, Any]:
        return {"success": False, "error": "MCP not available"}

    def synth(config: Optional[str] = None, out: Optional[str] = None, seed: int = 0,
              mode: str = "corrected") -> Dict[str, Any]:
        return {"success": False, "error": "MCP not available"}

    def simulate(x0: List[float], s0: str = "omega", config: Optional[str] = None,
                 out: Optional[str] = None, seed: int = 0, run: int = 0) -> Dict[str, Any]:
        return {"success": False, "error": "MCP not available"}

    def sweep(config: Optional[str] = None, out: Optional[str] = None, seed: int = 0) -> Dict[str, Any]:
        return {"success": False, "error": "MCP not available"}

    def cutlocus(config: Optional[str] = None, out: Optional[str] = None) -> Dict[str, Any]:
        return {"success": False, "error": "MCP not available"}

    def certify(config: Optional[str] = None, out: Optional[str] = None) -> Dict[str, Any]:
        return {"success": False, "error": "MCP not available"}

    def main():
        print("MCP not available - server cannot start", file=sys.stderr)


if __name__ == "__main__":
    main()
