@problemName Broken
@univariate true
@classLabels true a b
@data
1,2,3:a
