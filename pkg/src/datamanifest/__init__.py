"""Track project data files in a plaintext YAML manifest and sync them with
data repositories (Zenodo- and FigShare-style REST services)."""

from datamanifest.manifest import (
    MANIFEST_NAME,
    DataFileEntry,
    DataManifest,
    FigShareRemote,
    ProjectMetadata,
    ZenodoRemote,
    init_manifest,
    link_remote,
    load_manifest,
    parse_manifest,
    register_file,
    save_manifest,
    serialize_manifest,
    set_tracked,
)
from datamanifest.integrity import (
    LocalState,
    RemoteState,
    StatusReport,
    classify_local,
    classify_remote,
    compute_digest,
    project_status,
)

__version__ = "0.1.0"

__all__ = [
    "MANIFEST_NAME",
    "DataFileEntry",
    "DataManifest",
    "FigShareRemote",
    "ProjectMetadata",
    "ZenodoRemote",
    "init_manifest",
    "link_remote",
    "load_manifest",
    "parse_manifest",
    "register_file",
    "save_manifest",
    "serialize_manifest",
    "set_tracked",
    "LocalState",
    "RemoteState",
    "StatusReport",
    "classify_local",
    "classify_remote",
    "compute_digest",
    "project_status",
]
