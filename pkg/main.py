from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
import logging
import uvicorn

from models import EvalReport, EvaluateRequest, FlopsReport, SegmentRequest, SegmentResponse
from inference_service import InferenceService
from errors import CheckpointError, DatasetError, SegmentationError, UsageError
from config import settings

logger = logging.getLogger(__name__)

# Initialize FastAPI app
app = FastAPI(
    title="Actor Segmentation API",
    description="Segment the actor described by a sentence in synthetic video clips",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

inference_service: InferenceService = None


@app.on_event("startup")
async def startup_event():
    """Load the configured checkpoint and dataset vocabulary"""
    global inference_service
    if inference_service is not None and inference_service.ready:
        return
    print("🚀 Starting Actor Segmentation API...")
    try:
        inference_service = InferenceService().load()
        print(f"✅ Loaded {inference_service.config.variant.value} model from {inference_service.checkpoint}")
    except (SegmentationError, ValueError) as e:
        print(f"⚠️  No model loaded: {e}")
        print("   Train one with: python cli.py train, then restart the service")


def _service() -> InferenceService:
    if inference_service is None or not inference_service.ready:
        raise HTTPException(status_code=500, detail="No model loaded")
    return inference_service


@app.get("/")
async def root():
    """Service status"""
    ready = inference_service is not None and inference_service.ready
    return {
        "message": "Actor Segmentation API",
        "version": "1.0.0",
        "model_loaded": ready,
        "variant": inference_service.config.variant.value if ready else None,
        "checkpoint": str(inference_service.checkpoint) if ready else None,
        "data_dir": str(inference_service.data_dir) if ready else settings.DATA_DIR,
    }


@app.post("/segment", response_model=SegmentResponse)
async def segment(request: SegmentRequest):
    """Segment the referent of a dataset sample, optionally with a different query"""
    service = _service()
    try:
        return service.segment(request.sample_id, request.query)
    except DatasetError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error segmenting sample: {str(e)}")


@app.post("/evaluate", response_model=EvalReport)
async def evaluate(request: EvaluateRequest):
    """Score the loaded model on a dataset split"""
    service = _service()
    try:
        return service.evaluate(request.split)
    except UsageError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except (DatasetError, CheckpointError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error evaluating split: {str(e)}")


@app.get("/flops", response_model=FlopsReport)
async def get_flops():
    """Analytic multiply-accumulate count of the loaded configuration"""
    return _service().flops()


if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=8000,
        reload=True,
        log_level="info"
    )
