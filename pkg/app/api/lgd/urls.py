"""
    lgd模块路由入口
"""
from fastapi import APIRouter

from app.api.lgd import lgd_api

lgd_module_router = APIRouter(prefix="/lgd")

lgd_module_router.include_router(lgd_api.router, tags=["语言引导蒸馏模块"])
