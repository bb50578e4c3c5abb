from typing import Optional

# 退出码
EXIT_CONVERGED = 0
EXIT_MAX_ITERS = 2
EXIT_SUBPROBLEM_FAILURE = 3
EXIT_USAGE = 64
EXIT_DATA = 65


class PscvxError(Exception):
    """所有求解器异常的基类，携带 detail 与 exit_code"""

    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ArgumentError(PscvxError, ValueError):
    """维度不匹配或参数越界"""


class DomainError(PscvxError, ValueError):
    """输入超出映射的定义域（割迹、对跖点、非正质量）"""


class NumericalError(PscvxError):
    """雅可比矩阵出现非有限值等数值问题"""


class InvariantError(PscvxError):
    """内部不变量被破坏（流形隶属度、分段接口连续性）"""


class ConfigError(PscvxError):
    exit_code = EXIT_USAGE


class TrajectoryFileError(PscvxError):
    exit_code = EXIT_DATA

    def __init__(self, detail: str, row: Optional[int] = None):
        if row is not None:
            detail = f"row {row}: {detail}"
        super().__init__(detail)
        self.row = row
