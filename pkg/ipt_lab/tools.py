from typing import Any, Callable, Dict

from ipt_lab.pipelines import run_analyze, run_few_shot, run_report, run_seeds, run_sweep, run_train


def get_tools() -> Dict[str, Callable[..., Any]]:
    return {
        "train": run_train,
        "few_shot": run_few_shot,
        "sweep": run_sweep,
        "seeds": run_seeds,
        "analyze": run_analyze,
        "report": run_report,
    }


TOOL_COMMANDS = {"train": "train", "few_shot": "few-shot", "sweep": "sweep", "seeds": "seeds", "analyze": "analyze",
                 "report": "report"}
