"""Exception types shared across the toolchain.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`BackendError` subclasses to exit code 2.
"""
from __future__ import annotations

from typing import Iterable, Optional


class TrajqaError(Exception):
    pass


class ValidationError(TrajqaError):
    pass


class SchemaError(ValidationError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigConflictError(ValidationError):
    pass


class MissingTemplateError(ValidationError):
    def __init__(self, predicate: str):
        self.predicate = predicate
        super().__init__(f"no question template for predicate {predicate!r}")


class DegenerateAgreementError(ValidationError):
    pass


class MissingPredictionError(ValidationError):
    def __init__(self, item_ids: Iterable[str]):
        self.item_ids = sorted(item_ids)
        super().__init__(f"missing predictions for items: {', '.join(self.item_ids)}")


class CacheMissError(ValidationError):
    def __init__(self, video_id: str):
        self.video_id = video_id
        super().__init__(
            f"no cached trajectories for video {video_id!r}; run `trajqa extract` first "
            "or pass --auto-extract"
        )


class BackendError(TrajqaError):
    pass


class PartialExtractionError(BackendError):
    def __init__(self, failed: Iterable[int], video_id: str = "", causes: Optional[dict] = None):
        self.failed = sorted(set(failed))
        self.video_id = video_id
        self.causes = causes or {}
        prefix = f"video {video_id!r}: " if video_id else ""
        super().__init__(f"{prefix}extraction failed for chunks {self.failed}")


class AnswerBackendError(BackendError):
    def __init__(self, question_id: str, cause: BaseException | str):
        self.question_id = question_id
        self.cause = cause
        super().__init__(f"answer backend failed for {question_id!r}: {cause}")
