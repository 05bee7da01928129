import base64
import json
import shutil
import subprocess
from pathlib import Path

import pytest

ORACLE_DIR = Path(__file__).parent / "jwt_oracle"


class JwtOracle:
    """Drives the independent off-the-shelf JWT implementation (node)."""

    def __init__(self, directory: Path):
        self.directory = directory

    def verify_batch(self, cases):
        """cases: [{token, key (bytes), now (int)}] -> [{ok, claims?, error?}]"""
        payload = {
            "cases": [
                {"token": c["token"], "key_b64": base64.b64encode(c["key"]).decode(), "now": c["now"]}
                for c in cases
            ]
        }
        proc = subprocess.run(
            ["node", str(self.directory / "oracle.js")],
            input=json.dumps(payload).encode(),
            capture_output=True,
            timeout=60,
        )
        if proc.returncode != 0:
            raise RuntimeError(f"oracle failed: {proc.stderr.decode()}")
        return json.loads(proc.stdout.decode())["results"]

    def verify_one(self, token: str, key: bytes, now: int):
        return self.verify_batch([{"token": token, "key": key, "now": now}])[0]


@pytest.fixture(scope="session")
def jwt_oracle():
    if shutil.which("node") is None:
        pytest.fail("node is required for the independent JWT oracle")
    if not (ORACLE_DIR / "node_modules" / "jsonwebtoken").exists():
        proc = subprocess.run(
            ["npm", "install", "--no-audit", "--no-fund", "--loglevel=error"],
            cwd=ORACLE_DIR,
            capture_output=True,
            timeout=300,
        )
        if proc.returncode != 0:
            raise RuntimeError(f"npm install for the JWT oracle failed: {proc.stderr.decode()}")
    return JwtOracle(ORACLE_DIR)
