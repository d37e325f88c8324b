import logging
from datetime import datetime, timezone
from typing import Any, Dict, Optional

from fastapi import BackgroundTasks, FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .config import RunPlan
from .errors import ConfigError, PixelclError
from .pipeline import apply_preset, run_plan
from .utils.run_store import RUN_STATUSES, RunStore

logger = logging.getLogger(__name__)

app = FastAPI(
    title="pixelcl runs API",
    description="Trigger pipeline runs and fetch their results",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=False,
    allow_methods=["*"],
    allow_headers=["*"],
)


class TriggerRunRequest(BaseModel):
    plan: Dict[str, Any] = {}
    preset: Optional[str] = None
    runId: Optional[str] = None


run_store = None


def get_run_store() -> RunStore:
    global run_store
    if run_store is None:
        run_store = RunStore()
    return run_store


def execute_run(run_id: str, plan: RunPlan):
    """Background task: run the plan into the run directory and record the outcome."""
    store = get_run_store()
    store.update_run_status(run_id, 'running')
    try:
        report = run_plan(plan, str(store.run_dir(run_id) / 'output'), progress=False)
    except PixelclError as e:
        logger.error(f'Run {run_id} failed: {str(e)}')
        store.update_run_status(run_id, 'failed', {'error': str(e), 'exitCode': e.exit_code})
        return
    except Exception as e:
        logger.exception(f'Unexpected error in run {run_id}')
        store.update_run_status(run_id, 'failed', {'error': f'Internal error: {str(e)}', 'exitCode': 1})
        return
    store.update_run_status(run_id, 'completed', {'aggregate': report.aggregate})


@app.post("/runs")
async def trigger_run(request: TriggerRunRequest, background_tasks: BackgroundTasks):
    """Validate a plan, register it and run it in the background"""
    try:
        plan = RunPlan.model_validate(request.plan)
        if request.preset:
            plan = apply_preset(plan, request.preset)
    except (ValueError, ConfigError) as e:
        raise HTTPException(status_code=400, detail=f'Invalid plan: {str(e)}')

    run_id = request.runId or f"{plan.name}-{datetime.now(timezone.utc).strftime('%Y%m%d-%H%M%S-%f')}"
    store = get_run_store()
    if store.get_run(run_id):
        raise HTTPException(status_code=400, detail=f'Run already exists: {run_id}')

    result = store.put_run({
        'runId': run_id,
        'name': plan.name,
        'status': 'triggered',
        'plan': plan.model_dump(mode='json', by_alias=True),
        'preset': request.preset,
    })
    if not result['success']:
        raise HTTPException(
            status_code=500,
            detail=f'Failed to store run: {result.get("error", "Unknown error")}'
        )

    background_tasks.add_task(execute_run, run_id, plan)
    return {
        'runId': run_id,
        'status': 'triggered',
        'message': 'Run triggered successfully'
    }


@app.get("/runs")
async def list_runs(
    status: Optional[str] = Query(None, description="Filter by status"),
    limit: int = Query(25, ge=1, le=100, description="Maximum number of items to return"),
):
    """List runs, most recent first"""
    if status and status not in RUN_STATUSES:
        raise HTTPException(
            status_code=400,
            detail=f'Invalid status. Must be one of: {", ".join(RUN_STATUSES)}'
        )
    try:
        result = get_run_store().list_runs(status=status, limit=limit)
    except Exception as e:
        logger.exception('Error in list_runs')
        raise HTTPException(status_code=500, detail=f'Internal server error: {str(e)}')
    return {
        'items': [
            {k: item.get(k) for k in ('runId', 'name', 'status', 'timestamp', 'preset')}
            for item in result['items']
        ],
        'count': result['count'],
        'limit': limit,
        'filters': {'status': status},
    }


@app.get("/results/{run_id}")
async def get_results(run_id: str):
    """Get the record, report and artifacts of a run"""
    store = get_run_store()
    run = store.get_run(run_id)
    if not run:
        raise HTTPException(status_code=404, detail=f'Run not found: {run_id}')

    response_data = {
        'runId': run['runId'],
        'name': run.get('name'),
        'status': run['status'],
        'timestamp': run['timestamp'],
        'error': run.get('error'),
        'report': None,
        'artifacts': None,
    }
    if run['status'] in ('completed', 'failed'):
        try:
            response_data['report'] = store.read_report(run_id)
            response_data['artifacts'] = store.list_artifacts(run_id)
        except Exception as e:
            logger.warning(f'Failed to read artifacts for run {run_id}: {str(e)}')
            response_data['artifacts'] = {'error': 'Failed to read artifacts', 'details': str(e)}
    return response_data


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {
        'status': 'healthy',
        'timestamp': datetime.now(timezone.utc).isoformat(),
        'service': 'pixelcl-runs-api'
    }
