"""Builds the blv_py extension module by delegating to cargo.

Neither maturin nor setuptools-rust is assumed; the cdylib produced by
`cargo build -p blv-py --release` is copied to wherever setuptools wants
the extension. Set CARGO_TARGET_DIR to redirect the build directory.
"""

import os
import shutil
import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

ROOT = Path(__file__).resolve().parent


class CargoExtension(Extension):
    def __init__(self, name, package):
        super().__init__(name, sources=[])
        self.package = package


class CargoBuild(build_ext):
    def build_extension(self, ext):
        target_dir = Path(
            os.environ.get("CARGO_TARGET_DIR", ROOT / "target")
        ).resolve()
        subprocess.run(
            ["cargo", "build", "-p", ext.package, "--release"],
            cwd=ROOT,
            check=True,
        )
        stem = ext.package.replace("-", "_")
        if sys.platform == "darwin":
            built = target_dir / "release" / f"lib{stem}.dylib"
        elif sys.platform == "win32":
            built = target_dir / "release" / f"{stem}.dll"
        else:
            built = target_dir / "release" / f"lib{stem}.so"
        if not built.exists():
            raise FileNotFoundError(f"cargo did not produce {built}")
        out = Path(self.get_ext_fullpath(ext.name))
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, out)


setup(
    ext_modules=[CargoExtension("blv_py", package="blv-py")],
    cmdclass={"build_ext": CargoBuild},
)
