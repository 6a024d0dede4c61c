from fastapi import APIRouter
from app.api.endpoints import translate

router = APIRouter(prefix="/api")

router.include_router(translate.router, tags=["Translation"])
