from fastapi import APIRouter

from app.api.lgd.urls import lgd_module_router

router = APIRouter()
router.include_router(lgd_module_router)
