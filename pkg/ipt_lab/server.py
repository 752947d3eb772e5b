#!/usr/bin/env python3
"""IPT Lab MCP server using the official MCP Python SDK."""

import asyncio
import logging
import sys
import tempfile
from typing import Any

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import TextContent, Tool

from .cli import configure_logging, execute
from .config import ConfigError, log_level_from_env
from .report import render_summary
from .tools import TOOL_COMMANDS, get_tools

logger = logging.getLogger("ipt-lab")

app = Server("IPT-Lab")

_RUN_PROPS = {
    "config": {"type": "string", "description": "Path to the run config (JSON or TOML)"},
    "seed": {"type": "integer", "description": "Seed override"},
    "out": {"type": "string", "description": "Output directory override"},
    "strategy": {"type": "string", "description": "Strategy override (task-prompt, prefix, random-ipt, "
                                                   "pretrained-ipt, encoder-ipt, fine-tune)"},
}

_DESCRIPTIONS = {
    "train": "Tune one prompt strategy on a frozen backbone and report dev/test accuracy and trainable parameters.",
    "few_shot": "Run the K-shot protocol: 2K per label, 4-fold grid search, final fit with early stopping.",
    "sweep": "One training run per value along prompt-length, utilization-rate or strategy; returns the table.",
    "seeds": "Repeat one training run over several seeds; returns per-seed scores, their mean and sample sd.",
    "analyze": "Sentence-embedding projections, intra/inter category distances, parameter ratios, case study.",
    "report": "Markdown comparison table across finished run directories.",
}


def _schema(name: str) -> dict:
    if name == "report":
        return {"type": "object", "required": ["runs", "out"],
                "properties": {"runs": {"type": "array", "items": {"type": "string"}},
                               "out": {"type": "string"}}}
    props = dict(_RUN_PROPS)
    if name == "few_shot":
        props["k"] = {"type": "integer", "description": "Examples per label", "default": 32}
    if name == "sweep":
        props["axis"] = {"type": "string", "enum": ["prompt-length", "utilization-rate", "strategy"]}
        props["values"] = {"type": "array", "items": {"type": ["string", "number"]}}
        props["jobs"] = {"type": "integer", "default": 1}
    if name == "seeds":
        props["seeds"] = {"type": "array", "items": {"type": "integer"}, "minItems": 2,
                          "description": "Seeds to repeat the run with (default analysis.seeds)"}
    return {"type": "object", "required": ["config"], "properties": props}


@app.list_tools()
async def list_tools() -> list[Tool]:
    return [Tool(name=name, description=_DESCRIPTIONS[name], inputSchema=_schema(name)) for name in get_tools()]


def run_tool(name: str, arguments: dict) -> str:
    """Synchronous body of a tool call; returns the markdown reply."""
    from .pipelines import RunConfig, load_run_config, validate_for

    if name not in get_tools():
        raise ValueError(f"Unknown tool: {name}")
    command = TOOL_COMMANDS[name]
    if command == "report":
        rc = RunConfig(out=arguments["out"])
        summary = execute(command, rc, runs=list(arguments.get("runs", [])))
        return render_summary(summary)
    overrides = {k: arguments.get(k) for k in ("seed", "out", "strategy", "k", "axis", "values", "seeds")}
    rc = load_run_config(arguments.get("config"), overrides)
    validate_for(command, rc)
    summary = execute(command, rc, config_path=arguments.get("config"), jobs=int(arguments.get("jobs", 1)))
    return render_summary(summary)


@app.call_tool()
async def call_tool(name: str, arguments: Any) -> list[TextContent]:
    logger.info(f"Tool {name}: {arguments}")
    try:
        markdown = await asyncio.to_thread(run_tool, name, dict(arguments or {}))
        logger.info(f"Tool {name} completed")
        return [TextContent(type="text", text=markdown)]
    except ConfigError as e:
        logger.error(f"Config error in {name}: {e}")
        return [TextContent(type="text", text=f"Config error: {e}")]
    except Exception as e:
        logger.exception(f"Tool error: {e}")
        return [TextContent(type="text", text=f"Error: {str(e)}")]


async def serve():
    """Run the MCP server using stdio transport"""
    try:
        logger.info("Starting IPT-Lab server")
        options = app.create_initialization_options()
        async with stdio_server() as (read_stream, write_stream):
            logger.info("Stdio server started, running app")
            await app.run(read_stream, write_stream, options)
        logger.info("IPT-Lab server stopped normally")
    except Exception as e:
        logger.exception(f"Server error: {e}")
        raise


def main() -> None:
    # log to both stderr AND a file; stdout carries the protocol
    log_file = tempfile.gettempdir() + "/ipt-lab-debug.log"
    try:
        level = log_level_from_env()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(2)
    configure_logging(level, [logging.FileHandler(log_file, mode="w")])
    logger.info(f"Logging to {log_file}")
    asyncio.run(serve())


if __name__ == "__main__":
    main()
