"""
``sdf``: a Git-like command line for the data manifest.

Exit status is 0 on success, 1 on domain errors (validation, integrity,
remote failures) and 2 on usage errors. Diagnostics go to stderr; result
summaries go to stdout.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from datamanifest import manifest as mf
from datamanifest import remotes, transfer
from datamanifest.errors import AlreadyRegistered, FileNotFound, NotRegistered, SdfError
from datamanifest.integrity import compute_digest, project_status

log = logging.getLogger("sdf")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2

_STATUS_COLUMNS = ("path", "tracked", "local", "remote")


def render_status(report):
    """Plain-text table, one row per registered file in path order."""
    rows = [
        (e.path, "yes" if e.tracked else "no",
         e.local.value if e.local else f"error: {e.error}", e.remote.value)
        for e in sorted(report.entries, key=lambda e: e.path)
    ]
    widths = [max(len(r[i]) for r in [_STATUS_COLUMNS, *rows]) for i in range(len(_STATUS_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
             for row in [_STATUS_COLUMNS, *rows]]
    if report.untracked_on_disk:
        lines.append("")
        lines.append("not registered:")
        lines.extend(f"  {p}" for p in report.untracked_on_disk)
    return "\n".join(lines) + "\n"


def render_outcome(outcome, verb):
    lines = [f"{verb}\t{p}" for p in outcome.succeeded]
    lines += [f"skipped\t{p}\t{reason}" for p, reason in outcome.skipped]
    lines += [f"failed\t{p}\t{err}" for p, err in outcome.failed]
    lines.append(f"# {len(outcome.succeeded)} {verb}, {len(outcome.skipped)} skipped, "
                 f"{len(outcome.failed)} failed")
    return "\n".join(lines) + "\n"


class _Redactor(logging.Filter):
    """Scrub known secrets from log records."""

    def __init__(self, secrets):
        super().__init__()
        self.secrets = [s for s in secrets if s]

    def filter(self, record):
        msg = record.getMessage()
        for s in self.secrets:
            msg = msg.replace(s, "***")
        record.msg, record.args = msg, None
        return True


class _Context:
    def __init__(self, args, stdout):
        self.args = args
        self.stdout = stdout
        self.cwd = Path(os.getcwd())
        self._root = None

    @property
    def root(self):
        if self._root is None:
            self._root = mf.find_project_root(self.cwd)
        return self._root

    def load(self):
        return mf.load_manifest(self.root)

    def save(self, manifest):
        mf.save_manifest(manifest, self.root)

    def rel(self, path):
        return mf.project_relpath(self.root, path, base=self.cwd)

    def out(self, text):
        self.stdout.write(text)

    def jobs(self):
        return getattr(self.args, "jobs", None) or transfer.default_concurrency()

    def clients(self, manifest):
        return {link.service: remotes.make_service(link.service)
                for link in manifest.remotes.values()}


# -- commands --------------------------------------------------------------

def cmd_init(ctx):
    root = ctx.cwd
    mf.init_manifest(root)
    ctx.out(f"initialized {root / mf.MANIFEST_NAME}\n")
    return EXIT_OK


def _for_each_path(ctx, paths, fn):
    manifest = ctx.load()
    status = EXIT_OK
    for p in paths:
        try:
            manifest = fn(manifest, p)
        except SdfError as e:
            log.error("%s", e)
            status = EXIT_ERROR
    ctx.save(manifest)
    return status


def cmd_add(ctx):
    def add(manifest, p):
        rel = ctx.rel(p)
        local = mf.to_local(ctx.root, rel)
        if rel in manifest.files and not ctx.args.update:
            raise AlreadyRegistered(f"{rel} is already registered (use --update to re-register its digest)")
        if not local.is_file():
            raise FileNotFound(f"{p}: no such file")
        md5, size = compute_digest(local), local.stat().st_size
        if rel in manifest.files:
            ctx.out(f"updated\t{rel}\n")
            return mf.update_file(manifest, rel, md5, size)
        ctx.out(f"added\t{rel}\n")
        return mf.register_file(manifest, rel, md5, size, root=ctx.root)

    return _for_each_path(ctx, ctx.args.paths, add)


def _set_tracked(ctx, tracked):
    def apply(manifest, p):
        rel = ctx.rel(p)
        if rel not in manifest.files:
            raise NotRegistered(f"{rel} is not registered (run 'sdf add {p}' first)")
        return mf.set_tracked(manifest, rel, tracked)

    return _for_each_path(ctx, ctx.args.paths, apply)


def cmd_track(ctx):
    return _set_tracked(ctx, True)


def cmd_untrack(ctx):
    return _set_tracked(ctx, False)


def cmd_link(ctx):
    args = ctx.args
    cls = remotes.service_class(args.service)
    token = args.token or os.environ.get(f"SDF_{cls.name.upper()}_TOKEN")
    if not token:
        raise SdfError(f"no access token given; pass it as an argument or set SDF_{cls.name.upper()}_TOKEN")
    manifest = ctx.load()
    scope = mf.check_scope(manifest, ctx.rel(args.dir) if args.dir else ctx.rel("."), root=ctx.root)
    service = cls(token)
    link = service.create_deposit(args.name, manifest.metadata, remotes.UserConfig.load())
    remotes.store_token(cls.name, token)
    ctx.save(mf.link_remote(manifest, scope, link, root=ctx.root))
    ctx.out(f"linked\t{scope}\t{cls.name}\t{args.name}\n")
    return EXIT_OK


def cmd_status(ctx):
    manifest = ctx.load()
    listings = None
    if ctx.args.remotes and manifest.remotes:
        listings = transfer.fetch_listings(manifest, ctx.clients(manifest))
    report = project_status(manifest, ctx.root, listings, jobs=ctx.jobs())
    if ctx.args.json:
        ctx.out(json.dumps(report.to_dict(), indent=2) + "\n")
    else:
        ctx.out(render_status(report))
    return EXIT_OK


def cmd_push(ctx):
    manifest = ctx.load()
    outcome = transfer.push(manifest, ctx.root, ctx.clients(manifest), ctx.jobs(),
                            user=remotes.UserConfig.load())
    ctx.out(render_outcome(outcome, "uploaded"))
    return EXIT_OK if outcome.ok else EXIT_ERROR


def cmd_pull(ctx):
    manifest = ctx.load()
    outcome = transfer.pull_all(manifest, ctx.root, ctx.clients(manifest),
                                overwrite=ctx.args.overwrite, concurrency_limit=ctx.jobs())
    ctx.out(render_outcome(outcome, "downloaded"))
    return EXIT_OK if outcome.ok else EXIT_ERROR


def cmd_get(ctx):
    manifest = transfer.get_url(ctx.args.url, ctx.load(), ctx.root, cwd=ctx.cwd)
    ctx.save(manifest)
    ctx.out(f"downloaded\t{transfer.url_destination(ctx.args.url, ctx.root, ctx.cwd)}\n")
    return EXIT_OK


def cmd_bulk(ctx):
    args = ctx.args
    manifest, outcome = transfer.bulk_download(args.table, args.column, args.header, ctx.load(),
                                               ctx.root, cwd=ctx.cwd, concurrency_limit=ctx.jobs())
    ctx.save(manifest)
    ctx.out(render_outcome(outcome, "downloaded"))
    return EXIT_OK if outcome.ok else EXIT_ERROR


def cmd_metadata(ctx):
    args = ctx.args
    project = {k: getattr(args, k) for k in ("title", "description") if getattr(args, k) is not None}
    user = {k: getattr(args, f"user_{k}") for k in ("name", "email", "affiliation")
            if getattr(args, f"user_{k}") is not None}
    manifest = ctx.load()
    if project:
        manifest = mf.set_metadata(manifest, **project)
        ctx.save(manifest)
    config = remotes.UserConfig.load()
    if user:
        for k, v in user.items():
            setattr(config, k, v)
        config.save()
    for k in ("title", "description"):
        ctx.out(f"{k}\t{getattr(manifest.metadata, k) or ''}\n")
    for k in ("name", "email", "affiliation"):
        ctx.out(f"user.{k}\t{getattr(config, k) or ''}\n")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser():
    p = _Parser(prog="sdf", description="Track, verify and share project data files.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    def jobs(sp):
        sp.add_argument("-j", "--jobs", type=int, metavar="N",
                        help=f"concurrent transfers (default ${transfer.JOBS_ENV} or "
                             f"{transfer.DEFAULT_CONCURRENCY})")

    s = sub.add_parser("init", help="create data_manifest.yml in the current directory")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("add", help="register files (digest and size)")
    s.add_argument("paths", nargs="+")
    s.add_argument("--update", action="store_true", help="re-register already registered files")
    s.set_defaults(func=cmd_add)

    s = sub.add_parser("track", help="mark registered files for remote sync")
    s.add_argument("paths", nargs="+")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("untrack", help="stop syncing registered files")
    s.add_argument("paths", nargs="+")
    s.set_defaults(func=cmd_untrack)

    s = sub.add_parser("link", help="create a remote deposit for a directory")
    s.add_argument("service", help=f"one of: {', '.join(sorted(remotes.SERVICES))}")
    s.add_argument("token", nargs="?", help="access token (or set SDF_<SERVICE>_TOKEN)")
    s.add_argument("--name", required=True, help="deposit title")
    s.add_argument("--dir", help="directory the remote covers (default: current directory)")
    s.set_defaults(func=cmd_link)

    s = sub.add_parser("status", help="show which registered files changed")
    s.add_argument("--remotes", action="store_true", help="also compare with remote listings")
    s.add_argument("--json", action="store_true", help="machine-readable output")
    jobs(s)
    s.set_defaults(func=cmd_status)

    s = sub.add_parser("push", help="upload tracked files to their remotes")
    jobs(s)
    s.set_defaults(func=cmd_push)

    s = sub.add_parser("pull", help="download tracked files missing locally")
    s.add_argument("--overwrite", action="store_true", help="replace locally modified files")
    jobs(s)
    s.set_defaults(func=cmd_pull)

    s = sub.add_parser("get", help="download a URL into the current directory and register it")
    s.add_argument("url")
    s.set_defaults(func=cmd_get)

    s = sub.add_parser("bulk", help="download and register every URL in a TSV column")
    s.add_argument("table")
    s.add_argument("--column", type=int, required=True, help="1-based URL column")
    s.add_argument("--header", action="store_true", help="skip the first row")
    jobs(s)
    s.set_defaults(func=cmd_bulk)

    s = sub.add_parser("metadata", help="show or set project and user metadata")
    s.add_argument("--title")
    s.add_argument("--description")
    s.add_argument("--user-name")
    s.add_argument("--user-email")
    s.add_argument("--user-affiliation")
    s.set_defaults(func=cmd_metadata)
    return p


def _setup_logging(verbose, stderr):
    handler = logging.StreamHandler(stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    try:
        secrets = remotes.AuthStore().all_tokens()
    except SdfError:
        secrets = []
    secrets += [v for k, v in os.environ.items() if k.startswith("SDF_") and k.endswith("_TOKEN")]
    handler.addFilter(_Redactor(secrets))
    root = logging.getLogger()
    previous = (root.level, list(root.handlers))
    root.handlers = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for noisy in ("urllib3", "requests"):
        logging.getLogger(noisy).setLevel(logging.WARNING)
    return handler, previous


def run(argv=None, stdout=None, stderr=None):
    """Execute one command; returns the exit status."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        stderr.write(f"{e}\n")
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return e.code if isinstance(e.code, int) else EXIT_OK

    handler, (level, handlers) = _setup_logging(args.verbose, stderr)
    if args.command == "link" and args.token:
        handler.filters[0].secrets.append(args.token)
    try:
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            stderr.write("sdf: error: --jobs must be at least 1\n")
            return EXIT_USAGE
        if getattr(args, "column", None) is not None and args.column < 1:
            stderr.write("sdf: error: --column is 1-based\n")
            return EXIT_USAGE
        return args.func(_Context(args, stdout))
    except SdfError as e:
        log.error("%s", e)
        return EXIT_ERROR
    except KeyboardInterrupt:
        log.error("interrupted")
        return EXIT_ERROR
    finally:
        root = logging.getLogger()
        root.handlers = handlers
        root.setLevel(level)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
