import os
from pathlib import Path
from typing import Optional

import git


def code_revision(path=None) -> Optional[str]:
    """Short hash of the checkout ``path`` belongs to, with ``+dirty`` for local edits.

    Returns None outside a git checkout or when HQCNN_SKIP_GIT_CHECK=1.
    """
    if os.environ.get("HQCNN_SKIP_GIT_CHECK") == "1":
        return None
    path = Path(path) if path else Path(__file__).resolve().parent
    try:
        repo = git.Repo(path, search_parent_directories=True)
        sha = repo.git.rev_parse(repo.head.object.hexsha, short=8)
        return f"{sha}+dirty" if repo.is_dirty() else sha
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError, git.GitCommandError):
        return None
