"""CMake-driven build of the _stochdil extension.

pip install --no-build-isolation .   (the build backend drives CMake; tests
and the CLI are switched off, only the pybind11 module is compiled)
"""

import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class CMakeExtension(Extension):
    def __init__(self, name: str):
        super().__init__(name, sources=[])


class CMakeBuild(build_ext):
    def build_extension(self, ext: CMakeExtension) -> None:
        source_dir = Path(__file__).resolve().parent
        # Drop the shared object exactly where setuptools expects the
        # extension artifact (…/stochdil/_stochdil.cpython-*.so).
        out_dir = Path(self.get_ext_fullpath(ext.name)).resolve().parent
        build_dir = Path(self.build_temp).resolve() / "cmake"
        build_dir.mkdir(parents=True, exist_ok=True)

        config = "Debug" if self.debug else "Release"
        configure = [
            "cmake",
            "-S", str(source_dir),
            "-B", str(build_dir),
            f"-DCMAKE_BUILD_TYPE={config}",
            f"-DCMAKE_LIBRARY_OUTPUT_DIRECTORY={out_dir}",
            f"-DPython3_EXECUTABLE={sys.executable}",
            "-DSTOCHDIL_TESTS=OFF",
            "-DSTOCHDIL_CLI=OFF",
            "-DSTOCHDIL_PYTHON=ON",
        ]
        subprocess.run(configure, check=True)
        subprocess.run(
            ["cmake", "--build", str(build_dir), "--target", "_stochdil", "--parallel"],
            check=True,
        )


setup(
    packages=["stochdil"],
    package_dir={"stochdil": "python/stochdil"},
    ext_modules=[CMakeExtension("stochdil._stochdil")],
    cmdclass={"build_ext": CMakeBuild},
)
