from typing import List

from fastapi import APIRouter, Depends, HTTPException, status

from app.core.exceptions import ConfigError
from app.schemas.translate import (
    HealthResponse,
    ScoreRequest,
    ScoreResponse,
    TranslateRequest,
    TranslateResponse,
)
from app.services.translator import Translator, get_translator, loaded_translator

router = APIRouter()

SERVICE_NAME = "lexshort"


def served_translator() -> Translator:
    try:
        return get_translator()
    except ConfigError as e:
        raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail=e.message)


@router.get("/health", response_model=HealthResponse, summary="Service health")
def health() -> HealthResponse:
    translator = loaded_translator()
    if translator is None:
        return HealthResponse(status="ok", service=SERVICE_NAME, model_loaded=False)
    return HealthResponse(
        status="ok",
        service=SERVICE_NAME,
        model_loaded=True,
        variant=translator.model.variant.value,
        config_hash=translator.model.config.hash(),
    )


@router.post("/translate", response_model=TranslateResponse, summary="Translate sentences with beam search")
def translate(
    request: TranslateRequest,
    translator: Translator = Depends(served_translator),
) -> TranslateResponse:
    """
    Beam-search translation of each sentence.
    - Input is whitespace-tokenized and BPE-segmented like the training data
    - Hypotheses that hit max_len before EOS are flagged in `warnings`
    """
    hypotheses = translator.translate(request.sentences, request.beam_size, request.max_len)
    warnings: List[str] = [
        f"sentence {i}: no hypothesis finished within max_len" for i, h in enumerate(hypotheses) if not h.finished
    ]
    return TranslateResponse(translations=[h.text for h in hypotheses], hypotheses=hypotheses, warnings=warnings)


@router.post("/score", response_model=ScoreResponse, summary="Teacher-forced log-probabilities")
def score(
    request: ScoreRequest,
    translator: Translator = Depends(served_translator),
) -> ScoreResponse:
    """Log P(target + EOS | source) per pair; length-normalized when `normalize` is set."""
    scores = translator.score([(p.source, p.target) for p in request.pairs], request.normalize)
    return ScoreResponse(scores=scores)
