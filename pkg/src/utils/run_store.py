import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from ..config import get_env_var

RUN_STATUSES = ('triggered', 'running', 'completed', 'failed')


class RunStore:
    """File-backed registry of pipeline runs.

    Each run owns ``<root>/<run_id>/`` with a ``record.json`` next to the
    artifacts the pipeline writes there.
    """

    def __init__(self, root: Optional[str] = None):
        self.root = Path(root or get_env_var('PIXELCL_RUNS_DIR', 'runs'))
        self.root.mkdir(parents=True, exist_ok=True)

    def run_dir(self, run_id: str) -> Path:
        return self.root / run_id

    def _record_path(self, run_id: str) -> Path:
        return self.run_dir(run_id) / 'record.json'

    def _write(self, item: Dict[str, Any]):
        path = self._record_path(item['runId'])
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix('.tmp')
        tmp.write_text(json.dumps(item, sort_keys=True, indent=2))
        tmp.replace(path)

    def put_run(self, run_data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Store a new run record
        """
        status = run_data.get('status', 'triggered')
        if status not in RUN_STATUSES:
            return {'success': False, 'error': f'Invalid status: {status}'}
        item = {
            'runId': run_data['runId'],
            'name': run_data.get('name'),
            'status': status,
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'plan': run_data.get('plan'),
            'preset': run_data.get('preset'),
        }
        try:
            self._write(item)
            return {'success': True, 'item': item}
        except OSError as e:
            return {'success': False, 'error': str(e)}

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        path = self._record_path(run_id)
        if not path.is_file():
            return None
        return json.loads(path.read_text())

    def list_runs(self, status: Optional[str] = None, limit: int = 25) -> Dict[str, Any]:
        """
        List runs, most recent first, optionally filtered by status
        """
        items = []
        for path in self.root.glob('*/record.json'):
            item = json.loads(path.read_text())
            if status and item.get('status') != status:
                continue
            items.append(item)
        items.sort(key=lambda x: x.get('timestamp', ''), reverse=True)
        items = items[:limit]
        return {'items': items, 'count': len(items)}

    def update_run_status(self, run_id: str, status: str,
                          additional_data: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Update run status and merge additional fields into the record
        """
        if status not in RUN_STATUSES:
            return {'success': False, 'error': f'Invalid status: {status}'}
        existing = self.get_run(run_id)
        if not existing:
            return {'success': False, 'error': 'Run not found'}
        existing['status'] = status
        if additional_data:
            for key, value in additional_data.items():
                if key not in ('runId', 'timestamp'):
                    existing[key] = value
        try:
            self._write(existing)
            return {'success': True, 'item': existing}
        except OSError as e:
            return {'success': False, 'error': str(e)}

    def list_artifacts(self, run_id: str) -> Dict[str, Any]:
        """
        Categorise the files a run produced
        """
        base = self.run_dir(run_id)
        artifacts: Dict[str, List[Dict[str, Any]]] = {'metrics': [], 'checkpoints': [], 'reports': [], 'other': []}
        if not base.is_dir():
            return {'artifacts': artifacts, 'total_files': 0}
        files = sorted(p for p in base.rglob('*') if p.is_file() and p.name != 'record.json')
        for path in files:
            entry = {'path': str(path.relative_to(base)), 'size': path.stat().st_size}
            if path.suffix == '.csv':
                artifacts['metrics'].append(entry)
            elif path.suffix == '.pxcl':
                artifacts['checkpoints'].append(entry)
            elif path.suffix == '.json':
                artifacts['reports'].append(entry)
            else:
                artifacts['other'].append(entry)
        return {'artifacts': artifacts, 'total_files': len(files)}

    def read_report(self, run_id: str) -> Optional[Dict[str, Any]]:
        path = self.run_dir(run_id) / 'output' / 'report.json'
        if not path.is_file():
            return None
        return json.loads(path.read_text())
