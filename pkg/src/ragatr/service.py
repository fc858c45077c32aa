"""HTTP retrieval/answer service over a loaded snapshot.

The service shares one immutable index across request handlers, so any
number of concurrent reads are safe. There are no mutation endpoints:
appends happen through the CLI followed by a snapshot reload, preserving
the single-writer contract.
"""

from __future__ import annotations

from typing import Mapping

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .core import VehicleSpec
from .errors import RagatrError
from .index import ExemplarIndex, FilterClause, MetadataFilter
from .pipeline import TASKS, GeneratorClient, VqaQuestion, answer_pipeline


class FilterClauseModel(BaseModel):
    field: str
    op: str = "eq"
    value: str | float


class RetrieveRequest(BaseModel):
    vec: list[float] | None = None
    id: str | None = None
    k: int = Field(default=5, ge=1)
    filter: list[FilterClauseModel] = Field(default_factory=list)


class AnswerRequest(BaseModel):
    vec: list[float] | None = None
    id: str | None = None
    task: str
    k: int = Field(default=5, ge=1)


def _resolve_query(index: ExemplarIndex, vec: list[float] | None, record_id: str | None):
    if (vec is None) == (record_id is None):
        raise RagatrError("provide exactly one of vec or id")
    if record_id is not None:
        return index.record(record_id).embedding
    return vec


def _to_filter(clauses: list[FilterClauseModel]) -> MetadataFilter:
    return MetadataFilter(tuple(FilterClause(c.field, c.op, c.value) for c in clauses))


def create_app(
    index: ExemplarIndex,
    specs: Mapping[str, VehicleSpec],
    generator_client: GeneratorClient,
) -> FastAPI:
    app = FastAPI(title="ragatr", version="0.1.0")

    @app.exception_handler(RagatrError)
    async def handle_ragatr_error(request: Request, exc: RagatrError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "records": index.count, "dim": index.dim}

    @app.get("/v1/stats")
    def stats():
        return {
            "records": index.count,
            "dim": index.dim,
            "class_histogram": index.class_histogram(),
        }

    @app.post("/v1/retrieve")
    def retrieve(request: RetrieveRequest):
        query = _resolve_query(index, request.vec, request.id)
        hits = index.knn(query, request.k, _to_filter(request.filter))
        return {
            "hits": [
                {"id": h.record_id, "type": h.target_type, "score": h.score, "rank": h.rank}
                for h in hits
            ]
        }

    @app.post("/v1/answer")
    def answer(request: AnswerRequest):
        if request.task not in TASKS:
            raise RagatrError(f"unknown task {request.task!r}; expected one of {TASKS}")
        query = _resolve_query(index, request.vec, request.id)
        question = VqaQuestion(
            query_id=request.id or "inline-query",
            query_embedding=query,
            task=request.task,
            k=request.k,
        )
        result = answer_pipeline(index, question, generator_client, specs)
        return {
            "raw_text": result.raw_text,
            "target_type": result.target_type,
            "qualities": sorted(result.qualities) if result.qualities is not None else None,
            "mounted_weapon": result.mounted_weapon,
            "weight_tons": result.weight_tons,
            "length_m": result.length_m,
            "width_m": result.width_m,
            "height_m": result.height_m,
            "unparseable": result.unparseable,
        }

    return app
