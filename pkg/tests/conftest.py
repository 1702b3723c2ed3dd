import functools

import numpy as np
import pytest

from boneage import synth, training
from boneage.core import Radiograph, Sex


# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@functools.lru_cache(maxsize=None)
def labeled(n: int, seed: int = 5, canvas=(256, 256), channels=("gap", "carpal", "intensity")):
    """``n`` labeled synthetic samples, cached across tests."""
    specs = synth.sample_specs(n, seed, canvas_range=canvas, channels=channels)
    return tuple(training.from_synth(synth.generate(s), str(i)) for i, s in enumerate(specs))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def radiograph(pixels, id_="x", sex=Sex.FEMALE, age=None):
    return Radiograph(id_, np.asarray(pixels, np.float32), sex, age)


TINY_RUN = {
    "seed": 3,
    "segment": {"input_side": 64, "encoder_depth": 3, "base_channels": 4, "epochs": 2, "batch_size": 8, "lr": 3e-3},
    "orient": {
        "angle": {"input_side": 48, "width_mult": 0.25, "epochs": 1, "batch_size": 8},
        "flip": {"input_side": 48, "width_mult": 0.25, "epochs": 1, "batch_size": 8},
    },
    "detect": {"input_side": 64, "width_mult": 0.25, "bifpn_channels": 8, "bifpn_layers": 1, "epochs": 1,
               "batch_size": 8},
    "regress": {"input_side": 32, "width_mult": 0.1, "head_width": 8, "freeze_epochs": 1, "finetune_epochs": 1,
                "batch_size": 8},
    "augment": {"enabled": False},
}


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """A small labeled synthetic dataset on disk."""
    out = tmp_path_factory.mktemp("synth")
    synth.generate_dataset(16, 11, out_dir=out, canvas_range=(256, 256))
    return out


@pytest.fixture(scope="session")
def tiny_config(synth_dir, tmp_path_factory):
    import yaml

    path = tmp_path_factory.mktemp("cfg") / "run.yaml"
    path.write_text(yaml.safe_dump({**TINY_RUN, "data": {"train": str(synth_dir)}}))
    return path


@pytest.fixture(scope="session")
def bundle_dir(tiny_config, tmp_path_factory):
    """A complete registry trained through the command line, one version per stage."""
    import io

    from boneage import cli

    root = tmp_path_factory.mktemp("bundle")
    for stage in ("seg", "angle", "flip", "detect", "regress"):
        assert cli.main(["train", stage, "--config", str(tiny_config), "--registry", str(root)], io.StringIO()) == 0
    return root


def png_of(img) -> bytes:
    from boneage.core import encode_png

    return encode_png(img.pixels, bits=16)


def post_concurrently(app, requests):
    """Send every ``(files, data)`` request to ``app`` at once; responses in order."""
    import asyncio

    import httpx

    async def run():
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport, base_url="http://test") as client:
            return await asyncio.gather(*(client.post("/predict", files=f, data=d) for f, d in requests))

    return asyncio.run(run())


class AppClient:
    """Minimal synchronous client over an ASGI app."""

    def __init__(self, app):
        self.app = app

    def _call(self, method, url, **kw):
        import asyncio

        import httpx

        async def run():
            transport = httpx.ASGITransport(app=self.app)
            async with httpx.AsyncClient(transport=transport, base_url="http://test") as client:
                return await client.request(method, url, **kw)

        return asyncio.run(run())

    def get(self, url, **kw):
        return self._call("GET", url, **kw)

    def post(self, url, **kw):
        return self._call("POST", url, **kw)
