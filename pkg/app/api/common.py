from typing import Any, Optional

from fastapi.encoders import jsonable_encoder
from pydantic import BaseModel, Field
from starlette import status
from starlette.responses import JSONResponse

from app.core.exceptions import LgdError


class APIEnvelope(BaseModel):
    """
        统一响应信封：code 与 HTTP 状态码一致，data 为业务数据
    """
    code: int = status.HTTP_200_OK
    message: str = "success"
    data: dict = Field(default_factory=dict)


def _respond(envelope: APIEnvelope, status_code: int) -> JSONResponse:
    return JSONResponse(content=jsonable_encoder(envelope), status_code=status_code)


class BaseAPI(object):
    """
        基础API类，蒸馏任务的各个路由共用
    """

    @staticmethod
    def success(data: Any, message: str = "success"):
        return _respond(APIEnvelope(message=message, data=data), status.HTTP_200_OK)

    @staticmethod
    def error(code: int, message: str, status_code: Optional[int] = None, data: Optional[dict] = None):
        return _respond(APIEnvelope(code=code, message=message, data=data or {}), status_code or code)

    @staticmethod
    def from_exception(e: Exception):
        """
        异常转换为错误响应

        LgdError 与参数校验错误（ValueError，含 pydantic ValidationError）为客户端错误，返回400；
        其余返回500。

        Args:
            e : 捕获的异常

        Returns:
            JSONResponse
        """
        if isinstance(e, (LgdError, ValueError)):
            return BaseAPI.error(code=status.HTTP_400_BAD_REQUEST, message=str(e),
                                 data={"error_type": type(e).__name__})
        return BaseAPI.error(code=status.HTTP_500_INTERNAL_SERVER_ERROR, message=f"内部服务器错误: {str(e)}")
