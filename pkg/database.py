import json
import os
import sqlite3
import tempfile
from typing import Any, Dict, Optional


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as fh:
            fh.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


class RunStore:
    """sqlite cache of optimizer runs so labeling can resume after interruption."""

    def __init__(self, db_path='runs.db'):
        self.db_path = db_path
        self.init_db()

    def init_db(self):
        """Initialize database tables"""
        directory = os.path.dirname(os.path.abspath(self.db_path))
        os.makedirs(directory, exist_ok=True)
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                algorithm TEXT NOT NULL,
                class_id INTEGER NOT NULL,
                dim INTEGER NOT NULL,
                instance_seed INTEGER NOT NULL,
                run_seed INTEGER NOT NULL,
                budget INTEGER NOT NULL,
                best_error REAL NOT NULL,
                evals INTEGER NOT NULL,
                run_data TEXT NOT NULL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                PRIMARY KEY (algorithm, class_id, dim, instance_seed, run_seed, budget)
            )
        ''')

        conn.commit()
        conn.close()

    def put(self, key: Dict[str, Any], best_error: float, evals: int, run_data: Dict[str, Any]):
        """Store one run result"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute(
            'INSERT OR REPLACE INTO runs (algorithm, class_id, dim, instance_seed, run_seed, budget, '
            'best_error, evals, run_data) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)',
            (key['algorithm'], key['class_id'], key['dim'], key['instance_seed'],
             int(key['run_seed']), key['budget'], best_error, evals, json.dumps(run_data))
        )

        conn.commit()
        conn.close()

    def get(self, key: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        """Retrieve a run by its full key"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute(
            'SELECT best_error, evals, run_data FROM runs WHERE algorithm = ? AND class_id = ? '
            'AND dim = ? AND instance_seed = ? AND run_seed = ? AND budget = ?',
            (key['algorithm'], key['class_id'], key['dim'], key['instance_seed'],
             int(key['run_seed']), key['budget'])
        )

        result = cursor.fetchone()
        conn.close()

        if result:
            return {
                'best_error': result[0],
                'evals': result[1],
                'run_data': json.loads(result[2])
            }

        return None

    def count(self) -> int:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('SELECT COUNT(*) FROM runs')
        total = cursor.fetchone()[0]
        conn.close()
        return total
