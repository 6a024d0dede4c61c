import logging

from fastapi import FastAPI, HTTPException, Request, status
from fastapi.responses import JSONResponse

from app.api import router
from app.core import config
from app.core.exceptions import LexShortError
from app.core.logging import setup_logging
from app.services.translator import get_translator

logger = logging.getLogger(__name__)

app = FastAPI(
    title="lexshort",
    description="Translation and scoring with transformer models trained with lexical shortcuts",
    version="1.0.0",
)


@app.on_event("startup")
async def on_startup():
    setup_logging()
    if config.SERVED_CHECKPOINT:
        get_translator()
    else:
        logger.warning("LEXSHORT_CHECKPOINT is not set; translation endpoints will answer 503")


@app.exception_handler(LexShortError)
async def lexshort_exception_handler(request: Request, exc: LexShortError):
    logger.error(f"{type(exc).__name__} on {request.url.path}: {exc.message}")
    return JSONResponse(
        status_code=exc.http_status,
        content={
            "error": type(exc).__name__,
            "message": exc.message,
        },
    )


@app.exception_handler(HTTPException)
async def http_exception_handler(request: Request, exc: HTTPException):
    if exc.status_code == status.HTTP_400_BAD_REQUEST:
        return JSONResponse(
            status_code=exc.status_code,
            content={
                "error": "Bad Request",
                "message": exc.detail if isinstance(exc.detail, str) else str(exc.detail),
            },
        )
    return JSONResponse(
        status_code=exc.status_code,
        content={
            "error": exc.detail if isinstance(exc.detail, str) else str(exc.detail),
        },
    )


app.include_router(router.router)
