from typing import Literal, Optional

from celery.result import AsyncResult
from fastapi import APIRouter
from pydantic import BaseModel, Field

from app.api.common import BaseAPI
from app.core.celery import celery_app
from app.core.run_config import resolve_run_config
from app.lgd.suite import SUITES
from app.task.distill_task import distill_task, suite_task

router = APIRouter()


class DistillRequest(BaseModel):
    config: dict = Field(default_factory=dict, description="RunConfig JSON文档")
    preset: str = "desk"
    max_steps: Optional[int] = Field(default=None, ge=1)


class SuiteRequest(BaseModel):
    suite: str
    seeds: int = Field(default=5, ge=1)
    config: dict = Field(default_factory=dict)
    preset: str = "desk"
    contrast: Literal["full", "foreign"] = "foreign"
    subset: Optional[list[str]] = None


class LgdAPI(BaseAPI):
    """
    蒸馏任务API：提交运行 / 实验套件，查询任务状态
    """

    @staticmethod
    def _submit(submit):
        try:
            task = submit()
            return BaseAPI.success(data={"task_id": task.id})
        except Exception as e:
            return BaseAPI.from_exception(e)

    @staticmethod
    @router.post("/distill",
                 summary="提交蒸馏运行",
                 description="校验配置后提交一次蒸馏运行，返回任务id"
                 )
    async def distill(request: DistillRequest):
        """
        提交蒸馏运行

        Args:
            request : 运行配置、预设与可选的步数上限

        Returns:
            包含task_id的响应
        """
        def submit():
            resolve_run_config(request.preset, request.config)  # 提交前校验，错误直接返回400
            return distill_task.delay(config=request.config, preset=request.preset, max_steps=request.max_steps)

        return LgdAPI._submit(submit)

    @staticmethod
    @router.post("/suite",
                 summary="提交实验套件",
                 description="ablation / text_control / collapse / lgd_vs_seed"
                 )
    async def suite(request: SuiteRequest):
        def submit():
            if request.suite not in SUITES:
                raise ValueError(f"未知的实验套件: {request.suite}，可选 {SUITES}")
            resolve_run_config(request.preset, request.config)
            return suite_task.delay(suite=request.suite, seeds=request.seeds, config=request.config,
                                    preset=request.preset, contrast=request.contrast, subset=request.subset)

        return LgdAPI._submit(submit)

    @staticmethod
    @router.post("/get_status",
                 summary="获取结果",
                 description="查询任务状态与结果"
                 )
    async def get_status(task_id: str):
        """
        获取结果

        Args:
            task_id : 任务id

        Returns:
            任务状态；成功时附带结果，失败时附带错误信息
        """
        try:
            task_result = AsyncResult(task_id, app=celery_app)
            data = {"task_id": task_id, "state": task_result.state, "task_result": None}
            if task_result.successful():
                data["task_result"] = task_result.result
            elif task_result.failed():
                data["error"] = str(task_result.result)
            return BaseAPI.success(data=data)
        except Exception as e:
            return BaseAPI.from_exception(e)
