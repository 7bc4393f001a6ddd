# 演化神经架构搜索引擎

__version__ = '0.1.0'
