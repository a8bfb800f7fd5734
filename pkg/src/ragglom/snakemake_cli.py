"""CLI wrapper for running the octree agglomeration as a Snakemake workflow.

Locates the bundled Snakefile and invokes snakemake with it; every other
argument is passed through.

Usage:
    ragglom run-dist --store ./ds --depth 3 --plan-only
    ragglom-snakemake --cores 8 --config store=./ds
"""

import os
import subprocess
import sys
from importlib.resources import files

from loguru import logger

LOCK_MARKERS = ("LockException", "Directory cannot be locked")


def get_snakefile_path() -> str:
    """Absolute path to the bundled ``Snakefile.octree.smk``."""
    return str(files("ragglom").joinpath("Snakefile.octree.smk"))


def run_snakemake(cmd: list[str]) -> tuple[int, str]:
    """Run a snakemake command, streaming its output and capturing it for error checks.

    Returns:
        Tuple of (return_code, captured_output)
    """
    process = subprocess.Popen(
        cmd,
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
        bufsize=1,
    )
    captured_lines = []
    if process.stdout:
        for line in process.stdout:
            sys.stdout.write(line)
            sys.stdout.flush()
            captured_lines.append(line)
    return process.wait(), "".join(captured_lines)


def main(argv: list[str] | None = None) -> int:
    """Entry point of ``ragglom-snakemake``.

    A run that fails because the working directory is locked (a previous
    scheduler was killed) is unlocked and retried once.
    """
    args = sys.argv[1:] if argv is None else argv
    cmd = ["snakemake", "-s", get_snakefile_path(), *args]

    logger.info(f"Working directory: {os.getcwd()}")
    logger.info(f"Running Snakemake command: {' '.join(cmd)}")
    returncode, output = run_snakemake(cmd)

    if returncode != 0 and any(marker in output for marker in LOCK_MARKERS):
        logger.warning("Snakemake could not lock the working directory; unlocking and retrying")
        unlock_rc, _ = run_snakemake(cmd + ["--unlock"])
        if unlock_rc != 0:
            logger.error("Failed to unlock directory.")
            return returncode
        returncode, _ = run_snakemake(cmd)
        if returncode == 0:
            logger.info("Retry successful.")
        else:
            logger.error("Retry failed.")
    return returncode


if __name__ == "__main__":
    sys.exit(main())
