"""Blinded multi-rater visual evaluation: study creation, serving, analysis."""

from .store import StudyStore, RatingRecord
from .study import analyze, create_study, next_trial, submit_rating

__all__ = [
    "StudyStore",
    "RatingRecord",
    "create_study",
    "next_trial",
    "submit_rating",
    "analyze",
]
