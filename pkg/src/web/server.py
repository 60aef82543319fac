"""FastAPI dashboard over the run directories of ressl."""

from contextlib import asynccontextmanager
from fastapi import FastAPI, HTTPException
import sys
from pathlib import Path
import logging
import os
from typing import Dict, List, Optional

import yaml

sys.path.insert(0, str(Path(__file__).parent.parent))
from ressl.metrics import read_metrics

logger = logging.getLogger(__name__)

# Directory holding one sub-directory per run
runs_root: Optional[Path] = None


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Resolve the runs directory on startup."""
    global runs_root
    runs_root = Path(os.getenv("RESSL_OUTPUT_ROOT", "./runs"))
    logger.info(f"Dashboard serving {runs_root}")

    yield

    logger.info("Dashboard shutdown")


app = FastAPI(title="ressl runs", lifespan=lifespan)


def _root() -> Path:
    return runs_root if runs_root is not None else Path(os.getenv("RESSL_OUTPUT_ROOT", "./runs"))


def _run_dir(name: str) -> Path:
    root = _root().resolve()
    path = (root / name).resolve()
    if path.parent != root or not path.is_dir():
        raise HTTPException(status_code=404, detail=f"run {name!r} not found")
    return path


def _is_run(path: Path) -> bool:
    return path.is_dir() and ((path / "config.resolved.yaml").exists() or (path / "metrics.jsonl").exists())


@app.get("/runs")
async def list_runs() -> List[Dict]:
    """Run directories with their latest logged step."""
    root = _root()
    if not root.is_dir():
        return []
    runs = []
    for path in sorted(p for p in root.iterdir() if _is_run(p)):
        try:
            records = read_metrics(path / "metrics.jsonl")
        except ValueError as e:
            logger.error(f"Unreadable metrics in {path}: {e}")
            records = []
        runs.append({
            "name": path.name,
            "last_step": records[-1]["step"] if records else None,
            "checkpoints": sorted(p.name for p in (path / "checkpoints").glob("*.pt")),
        })
    return runs


@app.get("/runs/{name}")
async def run_detail(name: str) -> Dict:
    """Resolved config, latest metrics record, and a short summary."""
    path = _run_dir(name)
    config_file = path / "config.resolved.yaml"
    config = yaml.safe_load(config_file.read_text()) if config_file.exists() else None
    records = read_metrics(path / "metrics.jsonl")
    losses = [r["loss_total"] for r in records if "loss_total" in r]
    return {
        "name": name,
        "config": config,
        "latest": records[-1] if records else None,
        "summary": {
            "records": len(records),
            "min_loss": min(losses) if losses else None,
            "final_loss": losses[-1] if losses else None,
        },
    }


@app.get("/runs/{name}/metrics")
async def run_metrics(name: str, since_step: Optional[int] = None) -> List[Dict]:
    """Step records, skipping a torn final line."""
    return read_metrics(_run_dir(name) / "metrics.jsonl", since_step=since_step)


@app.get("/runs/{name}/eval")
async def run_eval(name: str) -> List[Dict]:
    """kNN monitor and evaluation command results."""
    return read_metrics(_run_dir(name) / "eval.jsonl")
