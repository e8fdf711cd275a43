"""Command line client. Talks to the service in-process, or to a running server with --server."""

from __future__ import annotations

import sys
import warnings
from pathlib import Path

import click
import yaml

from .config import FIELD_NAMES

_PATH_FIELDS = ("map", "trajectories")


def _client(server: str | None):
    if server:
        import httpx
        return httpx.Client(base_url=server, timeout=None)
    with warnings.catch_warnings():
        # the in-process client's httpx transport is deprecated upstream; harmless here
        warnings.filterwarnings("ignore", message=".*starlette.testclient")
        from fastapi.testclient import TestClient

    from .service import app
    return TestClient(app, raise_server_exceptions=True)


def _read_config(path: str) -> dict:
    p = Path(path)
    try:
        with open(p, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise click.ClickException(f"config file not found: {p}")
    except OSError as exc:
        raise click.ClickException(f"cannot read config {p}: {exc.strerror or exc}")
    except yaml.YAMLError as exc:
        raise click.ClickException(f"{p}: not valid YAML: {exc}")
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise click.ClickException(f"{p}: config must be a key/value mapping")
    # files named in the config are relative to the config's directory
    for key in _PATH_FIELDS:
        v = doc.get(key)
        if isinstance(v, str) and v != "synthetic" and not Path(v).is_absolute():
            doc[key] = str((p.parent / v).resolve())
    return doc


def _call(ctx, route: str, body: dict) -> dict:
    try:
        with _client(ctx.obj.get("server")) as client:
            resp = client.post(route, json=body)
    except Exception as exc:  # connection problems or an engine crash
        raise click.ClickException(f"{route} failed: {exc}")
    data = resp.json()
    if resp.status_code != 200:
        problems = data.get("problems") or []
        detail = data.get("detail")
        if isinstance(detail, list):  # request validation errors
            problems = [f"{'.'.join(map(str, d.get('loc', [])))}: {d.get('msg')}" for d in detail]
            detail = "invalid request"
        msg = str(detail) + "".join(f"\n  - {p}" for p in problems)
        raise click.ClickException(msg)
    return data


@click.group()
@click.option("--server", default=None, help="base URL of a running cmmsim service (default: in-process)")
@click.pass_context
def main(ctx, server):
    """Cooperative map matching simulator."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@click.option("--config", "config_path", required=True, help="scenario YAML file")
@click.option("--out", "out_dir", required=True, help="output directory for the CSV reports")
@click.option("--seeds", type=click.IntRange(min=1), default=1, show_default=True,
              help="number of consecutive seeds starting at the config seed")
@click.option("--mode", default=None, help="override the scenario mode")
@click.option("--fusion", default=None, help="override the fusion mechanism, e.g. constant_alpha(0.4)")
@click.pass_context
def run(ctx, config_path, out_dir, seeds, mode, fusion):
    """Run a scenario and write steps.csv, summary.csv and links.csv."""
    body = {"config": _read_config(config_path), "out_dir": str(Path(out_dir).resolve()), "seeds": seeds,
            "mode": mode, "fusion": fusion}
    data = _call(ctx, "/run", body)
    for row in data["summary"]:
        click.echo(f"seed {row['seed']:>4}  {row['mechanism']:<22} rmse {row['rmse_m']:8.3f} m  "
                   f"raw {row['raw_rmse_m']:8.3f} m  loss {row['loss_rate']:.3f}")
    for name, path in data["files"].items():
        click.echo(f"wrote {path}")


@main.command()
@click.option("--config", "config_path", required=True, help="scenario YAML file")
@click.pass_context
def validate(ctx, config_path):
    """Check a scenario config without running it."""
    data = _call(ctx, "/validate", {"config": _read_config(config_path)})
    if not data["valid"]:
        raise click.ClickException("invalid config" + "".join(f"\n  - {p}" for p in data["problems"]))
    click.echo(f"{config_path}: ok")


@main.command("synth-map")
@click.option("--out", "out_path", required=True, help="map YAML file to write")
@click.option("--extent", type=float, default=3000.0, show_default=True, help="grid side length in meters")
@click.option("--spacing", type=float, default=250.0, show_default=True, help="street spacing in meters")
@click.pass_context
def synth_map(ctx, out_path, extent, spacing):
    """Write the demo street-grid road map."""
    data = _call(ctx, "/synth-map", {"out": str(Path(out_path).resolve()), "extent_m": extent,
                                     "spacing_m": spacing})
    click.echo(f"wrote {data['path']} ({data['n_segments']} lanes)")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("cmmsim.service:app", host=host, port=port)


@main.command("config-keys")
def config_keys():
    """List the accepted config keys."""
    for name in FIELD_NAMES:
        click.echo(name)


if __name__ == "__main__":
    sys.exit(main())
