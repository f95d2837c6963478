from __future__ import annotations

import logging
from pathlib import Path
from uuid import uuid4

from fastapi import FastAPI, HTTPException

from src.config import DEFAULT_CHECKPOINT, DEFAULT_OUT_DIR
from src.errors import FewSegError
from src.models import PredictRequest, PredictResponse
from src.services.prediction import predict

app = FastAPI()


@app.get("/health")
def health() -> dict[str, str]:
    return {"status": "ok"}


@app.post("/predict", response_model=PredictResponse)
def predict_mask(request: PredictRequest) -> PredictResponse:
    session_id = str(uuid4())
    checkpoint = request.checkpoint or DEFAULT_CHECKPOINT
    out_dir = Path(request.output_dir) if request.output_dir else DEFAULT_OUT_DIR / "predictions" / session_id

    logging.info(
        "Received prediction request: session_id=%s, query_image=%s, n_shot=%d, checkpoint=%s",
        session_id,
        request.query_image,
        len(request.support_images),
        checkpoint,
    )
    if checkpoint is None:
        raise HTTPException(status_code=422, detail="No checkpoint given and FEWSEG_CHECKPOINT is unset")

    try:
        result = predict(
            request.query_image,
            request.support_images,
            request.support_masks,
            checkpoint,
            out_dir,
            seed=request.seed,
            session_id=session_id,
        )
    except (FewSegError, FileNotFoundError) as exc:
        logging.exception("Prediction failed for session_id=%s", session_id)
        raise HTTPException(status_code=422, detail=str(exc)) from exc

    return PredictResponse(
        session_id=session_id,
        mask_path=str(result.mask_path),
        score_path=str(result.score_path),
        foreground_fraction=result.foreground_fraction,
        status="completed",
    )
