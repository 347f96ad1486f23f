from fastapi import FastAPI

from app.api.urls import router
from app.core.config import settings
from app.core.log import setup_logging

setup_logging(settings.LGD_LOG_LEVEL)

app = FastAPI(title="LGD distillation service")
app.include_router(router)
