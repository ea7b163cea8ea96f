"""Operator command line.

Exit codes: 0 success, 1 a verdict other than genuine/authentic (or a
calibration that found no separation), 2 usage error, 3 I/O or storage failure.

With ``--seed N`` every random choice derives from N and timestamps come from
a synthetic clock (a fixed epoch plus one second per logged event), so the
same command against the same registry prints the same bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable

from . import adversary_sim, upo
from .codegen import PolicyInvalid
from .currency_bank import CentralBank, DuplicateSerial, NoteVerdictTag, offline_check
from .protocol_core import DuplicateBatch, InvalidIdentity, ProductAuthority, ProductIdentity, Verdict
from .registry import CorruptLog, Registry, RegistryError
from .timestamps import format_ts, now_utc
from .verify_service import ServiceConfig, serve

EXIT_OK, EXIT_VERDICT, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SEED_EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anticf", description="Concealed-code and UPO anti-counterfeiting registry.")
    p.add_argument("--config", metavar="PATH", help="JSON service config (ANTICF_* env vars override keys)")
    p.add_argument("--registry", metavar="PATH", help="registry log file (overrides registry_path)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--seed", type=int, metavar="N", help="deterministic randomness and timestamps")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def identity_flags(sp, serial=True):
        sp.add_argument("--manufacturer", required=True)
        sp.add_argument("--product", required=True)
        sp.add_argument("--batch", required=True)
        if serial:
            sp.add_argument("--serial", required=True)

    sp = sub.add_parser("mint", help="mint a batch and print its codes (the only command that shows codes)")
    identity_flags(sp, serial=False)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--inspection-codes", action="store_true", help="also issue a second code for customs")

    sp = sub.add_parser("verify", help="present a code for one product")
    identity_flags(sp)
    sp.add_argument("--code", required=True)

    sp = sub.add_parser("audit", help="event history of one product, codes removed")
    identity_flags(sp)

    sub.add_parser("serve", help="run the HTTP verification service")

    sp = sub.add_parser("note-enroll", help="bind a note serial to a fingerprint")
    sp.add_argument("--serial", required=True)
    sp.add_argument("--denomination", type=int, required=True, help="minor currency units")
    sp.add_argument("--fingerprint", required=True, metavar="PATH")
    sp.add_argument("--currency", default="EUR")

    sp = sub.add_parser("note-verify", help="check a note fingerprint against the bank, or offline")
    sp.add_argument("--serial", required=True)
    sp.add_argument("--fingerprint", required=True, metavar="PATH")
    sp.add_argument("--currency", default="EUR")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--offline", action="store_true", help="compare with --reference instead of the registry")
    sp.add_argument("--reference", metavar="PATH", help="reference fingerprint for --offline")

    sp = sub.add_parser("scan", help="fabricate a simulated note and write one measurement of it")
    sp.add_argument("--note-seed", type=int, required=True, help="identifies the physical note")
    sp.add_argument("--out", required=True, metavar="PATH")
    sp.add_argument("--grid-size", type=int, default=upo.SensorParams.grid_size)

    sp = sub.add_parser("calibrate", help="run a collision study and report the threshold")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--out", metavar="PATH", help="also write the JSON report here")
    sp.add_argument("--channels", default=",".join(upo.CHANNELS))

    sp = sub.add_parser("simulate", help="run a counterfeiting scenario")
    sp.add_argument("--scenario", required=True, metavar="PATH", help="JSON ScenarioConfig")
    sp.add_argument("--runs", type=int, default=1)
    return p


class _Context:
    def __init__(self, args):
        self.args = args
        try:
            config = ServiceConfig.load(args.config)
        except OSError as exc:
            raise OSError(f"cannot read config: {exc}") from exc
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad config: {exc}") from None
        if args.registry:
            config = replace(config, registry_path=args.registry)
        self.config = config
        self._registry = None

    @property
    def registry(self) -> Registry:
        if self._registry is None:
            if not self.config.registry_path:
                raise UsageError("no registry configured; pass --registry PATH")
            self._registry = Registry(self.config.registry_path, self.config.registry_id, self.config.fsync)
        return self._registry

    def now(self) -> datetime:
        if self.args.seed is None:
            return now_utc()
        return SEED_EPOCH + timedelta(seconds=self.registry.last_seq + 1)

    def close(self):
        if self._registry is not None:
            self._registry.close()


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, indent=2))
    else:
        print(text)


def _read_fingerprint(path: str) -> upo.Fingerprint:
    try:
        return upo.Fingerprint.decode(Path(path).read_text(encoding="utf-8"))
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _identity(args) -> ProductIdentity:
    try:
        return ProductIdentity(args.manufacturer, args.product, args.batch, args.serial)
    except InvalidIdentity as exc:
        raise UsageError(str(exc)) from None


def cmd_mint(ctx: _Context, args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    authority = ProductAuthority(ctx.registry, ctx.config.clone_alert_threshold)
    try:
        records = authority.mint_batch(args.manufacturer, args.product, args.batch, args.count,
                                       with_inspection_codes=args.inspection_codes,
                                       rng_seed=args.seed, now=ctx.now())
    except (DuplicateBatch, InvalidIdentity, PolicyInvalid) as exc:
        raise UsageError(str(exc)) from None
    rows = []
    for rec in records:
        row = {**rec.identity.to_dict(), "code": rec.secret.display()}
        if rec.inspection_secret is not None:
            row["inspection_code"] = rec.inspection_secret.display()
        rows.append(row)
    text = "\n".join(f"{r['serial_number']}\t{r['code']}" + (f"\t{r['inspection_code']}" if "inspection_code" in r else "")
                     for r in rows)
    _emit(args, {"records": rows}, text)
    return EXIT_OK


def cmd_verify(ctx: _Context, args) -> int:
    authority = ProductAuthority(ctx.registry, ctx.config.clone_alert_threshold)
    outcome = authority.verify(_identity(args), args.code, ctx.now())
    body = outcome.to_dict()
    text = outcome.verdict.value
    if outcome.original_timestamp is not None:
        text += f" (first verified {body['original_timestamp']})"
    if outcome.verdict is Verdict.CLONE_ALERT:
        text += f" presentations={outcome.presentation_count}"
    _emit(args, body, text)
    return EXIT_OK if outcome.verdict is Verdict.GENUINE else EXIT_VERDICT


def cmd_audit(ctx: _Context, args) -> int:
    identity = _identity(args)
    authority = ProductAuthority(ctx.registry, ctx.config.clone_alert_threshold)
    events = [e.to_dict() for e in authority.audit(identity)]
    if not events:
        raise UsageError(f"no record for {identity.key}")
    lines = [f"{e['seq']}\t{e['recorded_at']}\t{e['kind']}\t{json.dumps(e['payload'], sort_keys=True)}" for e in events]
    _emit(args, {"identity": identity.to_dict(), "events": events}, "\n".join(lines))
    return EXIT_OK


def cmd_serve(ctx: _Context, args) -> int:
    if not ctx.config.canonical_domains:
        raise UsageError("canonical_domains must not be empty")
    serve(ctx.config)
    return EXIT_OK


def _bank(ctx: _Context, currency: str) -> CentralBank:
    return CentralBank(ctx.registry, currency, ctx.config.match_threshold, ctx.config.min_online_denomination)


def cmd_note_enroll(ctx: _Context, args) -> int:
    fp = _read_fingerprint(args.fingerprint)
    try:
        rec = _bank(ctx, args.currency).enroll(args.serial, args.denomination, fp, ctx.now())
    except (DuplicateSerial, ValueError) as exc:
        raise UsageError(str(exc)) from None
    body = {"currency_id": rec.currency_id, "serial": rec.serial, "denomination": rec.denomination,
            "enrolled_at": format_ts(rec.enrolled_at)}
    _emit(args, body, f"enrolled {rec.currency_id}/{rec.serial}")
    return EXIT_OK


def cmd_note_verify(ctx: _Context, args) -> int:
    measured = _read_fingerprint(args.fingerprint)
    threshold = args.threshold if args.threshold is not None else ctx.config.match_threshold
    if not 0.0 < threshold < 1.0:
        raise UsageError("--threshold must lie in (0, 1)")
    if args.offline:
        if not args.reference:
            raise UsageError("--offline needs --reference PATH")
        reference = _read_fingerprint(args.reference)
        if reference.grid_size != measured.grid_size:
            ok, sim = False, -1.0
        else:
            ok, sim = offline_check(reference, measured, threshold), upo.similarity(reference, measured)
        tag = NoteVerdictTag.AUTHENTIC if ok else NoteVerdictTag.FINGERPRINT_MISMATCH
        body = {"verdict": tag.value, "similarity": round(sim, 6), "offline": True}
    else:
        if args.reference:
            raise UsageError("--reference only applies with --offline")
        verdict = _bank(ctx, args.currency).verify_note(args.serial, measured, threshold, ctx.now())
        tag, body = verdict.tag, verdict.to_dict()
    text = tag.value + (f" similarity={body['similarity']:.6f}" if "similarity" in body else "")
    _emit(args, body, text)
    return EXIT_OK if tag is NoteVerdictTag.AUTHENTIC else EXIT_VERDICT


def cmd_scan(ctx: _Context, args) -> int:
    sensor = upo.SensorParams(grid_size=args.grid_size, rng_seed=args.seed)
    try:
        sensor.validate()
    except upo.ParamsInvalid as exc:
        raise UsageError(str(exc)) from None
    note = upo.fabricate(upo.FabricationParams(rng_seed=args.note_seed))
    fp = upo.measure(note, sensor)
    Path(args.out).write_text(fp.encode() + "\n", encoding="utf-8")
    _emit(args, {"out": args.out, "grid_size": fp.grid_size, "flecks": len(note)}, f"wrote {args.out}")
    return EXIT_OK


def cmd_calibrate(ctx: _Context, args) -> int:
    channels = tuple(c.strip() for c in args.channels.split(",") if c.strip())
    if not channels or set(channels) - set(upo.CHANNELS):
        raise UsageError(f"--channels must be drawn from {','.join(upo.CHANNELS)}")
    if args.n < 100:
        raise UsageError("--n must be >= 100")
    seed = args.seed
    fab = upo.FabricationParams(rng_seed=seed)
    sensor = upo.SensorParams(rng_seed=None if seed is None else seed + 1)
    try:
        report = upo.collision_study(args.n, fab, sensor, channels=channels)
        status = EXIT_OK
    except upo.NoSeparation as exc:
        report, status = exc.report, EXIT_VERDICT
    body = report.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if report.suggested_threshold is None:
        text = f"no separation: genuine_min={report.genuine_min:.6f} impostor_max={report.impostor_max:.6f}"
    else:
        text = (f"tau={report.suggested_threshold:.6f} FAR={report.empirical_far:.6g} FRR={report.empirical_frr:.6g} "
                f"genuine_min={report.genuine_min:.6f} impostor_max={report.impostor_max:.6f} "
                f"pairs={report.genuine_pairs}/{report.impostor_pairs}")
    _emit(args, body, text)
    return status


def cmd_simulate(ctx: _Context, args) -> int:
    try:
        data = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        config = adversary_sim.ScenarioConfig.from_dict(data)
        if args.seed is not None:
            config = replace(config, rng_seed=args.seed)
        config.validate()
    except (json.JSONDecodeError, adversary_sim.ConfigInvalid) as exc:
        raise UsageError(f"{args.scenario}: {exc}") from None
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    if args.runs == 1:
        report = adversary_sim.run_scenario(config)
        _emit(args, report.to_dict(), report.to_table())
        return EXIT_OK
    summary = adversary_sim.summarize(adversary_sim.run_many(config, args.runs))
    lines = [f"runs  {summary['runs']}"]
    for key in ("detection_at_point_of_check", "cumulative_detection", "false_accusations",
                "cloned_code_detection", "undetected_counterfeits"):
        s = summary[key]
        lines.append(f"{key}  " + ("n/a" if s is None else f"mean={s['mean']:.4f} min={s['min']:.4f} max={s['max']:.4f}"))
    width = max(len(line.split("  ")[0]) for line in lines)
    _emit(args, summary, "\n".join(line.split("  ", 1)[0].ljust(width) + "  " + line.split("  ", 1)[1] for line in lines))
    return EXIT_OK


COMMANDS: dict[str, Callable[[_Context, argparse.Namespace], int]] = {
    "mint": cmd_mint,
    "verify": cmd_verify,
    "audit": cmd_audit,
    "serve": cmd_serve,
    "note-enroll": cmd_note_enroll,
    "note-verify": cmd_note_verify,
    "scan": cmd_scan,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx = None
    try:
        ctx = _Context(args)
        return COMMANDS[args.command](ctx, args)
    except UsageError as exc:
        print(f"anticf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorruptLog as exc:
        print(f"anticf: corrupt registry: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, RegistryError) as exc:
        print(f"anticf: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if ctx is not None:
            ctx.close()


def main() -> None:
    sys.exit(dispatch())
